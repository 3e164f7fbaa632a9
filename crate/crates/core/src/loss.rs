//! Training losses: cross-entropy and the Lovasz-softmax Jaccard surrogate,
//! combined with unit weights over the semantic and motion heads.

use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// Mean negative log-softmax of the target class over non-ignored points.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[Option<usize>]) -> Result<Var<'t>> {
    logits.log_softmax(1)?.nll_mean(targets)
}

/// Lovasz-softmax loss on probabilities (rows summing to 1).
pub fn lovasz_softmax<'t>(probs: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    probs.lovasz_softmax(targets)
}

/// Per-class Lovasz terms of a probability tensor, for inspection and
/// oracle comparison; classes absent from `targets` are skipped.
pub fn lovasz_per_class(probs: &Tensor, targets: &[usize]) -> Vec<(usize, f64)> {
    let n = probs.dims()[0];
    let c = probs.dims()[1];
    let mut present: Vec<usize> = targets.to_vec();
    present.sort_unstable();
    present.dedup();
    present
        .into_iter()
        .map(|cls| {
            let (term, _, _, _) =
                crate::tensor::lovasz_class_term(probs.data(), targets, n, c, cls);
            (cls, term)
        })
        .collect()
}

/// The four loss terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub ce_sem: f64,
    pub ls_sem: f64,
    pub ce_mov: f64,
    pub ls_mov: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Sum of semantic and motion cross-entropy and Lovasz terms, unit-weighted.
/// Returns the scalar loss variable (for backward) and the term breakdown.
pub fn total_loss<'t>(
    sem_logits: Var<'t>,
    mov_logits: Var<'t>,
    sem_targets: &[usize],
    mov_targets: &[usize],
) -> Result<(Var<'t>, LossReport)> {
    let sem_opt: Vec<Option<usize>> = sem_targets.iter().map(|&t| Some(t)).collect();
    let mov_opt: Vec<Option<usize>> = mov_targets.iter().map(|&t| Some(t)).collect();
    let ce_sem = cross_entropy(sem_logits, &sem_opt)?;
    let ls_sem = lovasz_softmax(sem_logits.softmax(1)?, sem_targets)?;
    let ce_mov = cross_entropy(mov_logits, &mov_opt)?;
    let ls_mov = lovasz_softmax(mov_logits.softmax(1)?, mov_targets)?;
    let total = ce_sem.add(&ls_sem)?.add(&ce_mov)?.add(&ls_mov)?;
    let report = LossReport {
        ce_sem: ce_sem.item()?,
        ls_sem: ls_sem.item()?,
        ce_mov: ce_mov.item()?,
        ls_mov: ls_mov.item()?,
        total: total.item()?,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_for(targets: &[usize], c: usize, margin: f64) -> Tensor {
        let mut data = vec![0.0; targets.len() * c];
        for (i, &t) in targets.iter().enumerate() {
            data[i * c + t] = margin;
        }
        Tensor::new(vec![targets.len(), c], data).unwrap()
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::new();
        // uniform logits, 4 classes -> ln 4
        let x = tape.leaf(Tensor::zeros(vec![5, 4]));
        let loss = cross_entropy(x, &[Some(0), Some(1), Some(2), Some(3), Some(0)]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
        // +50 margin -> essentially zero
        let targets = [1usize, 0, 1];
        let x = tape.leaf(logits_for(&targets, 2, 50.0));
        let t: Vec<Option<usize>> = targets.iter().map(|&v| Some(v)).collect();
        let loss = cross_entropy(x, &t).unwrap();
        assert!(loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, c) = (20, 5);
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![n, c], data.clone()).unwrap());
        let t: Vec<Option<usize>> = targets.iter().map(|&v| Some(v)).collect();
        let loss = cross_entropy(x, &t).unwrap().item().unwrap();
        // direct log-sum-exp oracle
        let mut want = 0.0;
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[i]];
        }
        want /= n as f64;
        assert!((loss - want).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_is_point_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, c) = (12, 3);
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![n, c], data.clone()).unwrap());
        let t: Vec<Option<usize>> = targets.iter().map(|&v| Some(v)).collect();
        let a = cross_entropy(x, &t).unwrap().item().unwrap();
        // reversed order
        let mut rev_data = Vec::new();
        for i in (0..n).rev() {
            rev_data.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let rev_targets: Vec<Option<usize>> = targets.iter().rev().map(|&v| Some(v)).collect();
        let xr = tape.leaf(Tensor::new(vec![n, c], rev_data).unwrap());
        let b = cross_entropy(xr, &rev_targets).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let targets = [0usize, 1, 0, 1, 1];
        let tape = Tape::new();
        let x = tape.leaf(logits_for(&targets, 2, 60.0));
        let loss = lovasz_softmax(x.softmax(1).unwrap(), &targets).unwrap();
        assert!(loss.item().unwrap() < 1e-12);
    }

    #[test]
    fn lovasz_hard_predictions_equal_one_minus_iou() {
        // Hard 0/1 probabilities: each class term equals the discrete
        // Jaccard loss computed from confusion counts.
        let targets = [0usize, 0, 1, 1, 1, 0];
        let preds = [0usize, 1, 1, 0, 1, 0];
        let n = targets.len();
        let mut data = vec![0.0; n * 2];
        for (i, &p) in preds.iter().enumerate() {
            data[i * 2 + p] = 1.0;
        }
        let probs = Tensor::new(vec![n, 2], data).unwrap();
        let per_class = lovasz_per_class(&probs, &targets);
        let confusion = ConfusionMatrix::from_predictions(&preds, &targets, 2).unwrap();
        for (cls, term) in per_class {
            let iou = confusion.iou_of(cls).unwrap();
            assert!(
                (term - (1.0 - iou)).abs() < 1e-12,
                "class {cls}: term {term} vs 1-IoU {}",
                1.0 - iou
            );
        }
    }

    #[test]
    fn lovasz_decreases_when_correct_prob_rises() {
        // Bumping the logit of the true class (softmax renormalizes) never
        // increases the loss.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.random_range(3..10usize);
            let c = rng.random_range(2..4usize);
            let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![n, c], data.clone()).unwrap());
            let base = lovasz_softmax(x.softmax(1).unwrap(), &targets)
                .unwrap()
                .item()
                .unwrap();
            let i = rng.random_range(0..n);
            let mut bumped = data.clone();
            bumped[i * c + targets[i]] += 0.5;
            let xb = tape.leaf(Tensor::new(vec![n, c], bumped).unwrap());
            let after = lovasz_softmax(xb.softmax(1).unwrap(), &targets)
                .unwrap()
                .item()
                .unwrap();
            assert!(after <= base + 1e-12, "loss rose from {base} to {after}");
        }
    }

    #[test]
    fn lovasz_rejects_unnormalized_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.9, 0.9]).unwrap());
        assert!(lovasz_softmax(x, &[0]).is_err());
    }

    #[test]
    fn total_loss_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 15;
        let sem_t: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let mov_t: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let sem_data: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mov_data: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let sem = tape.leaf(Tensor::new(vec![n, 4], sem_data).unwrap());
        let mov = tape.leaf(Tensor::new(vec![n, 2], mov_data).unwrap());
        let (total, report) = total_loss(sem, mov, &sem_t, &mov_t).unwrap();
        let sum = report.ce_sem + report.ls_sem + report.ce_mov + report.ls_mov;
        assert!((report.total - sum).abs() < 1e-12);
        assert!((total.item().unwrap() - sum).abs() < 1e-12);
        assert!(report.ce_sem >= 0.0 && report.ls_sem >= 0.0);
        assert!(report.ce_mov >= 0.0 && report.ls_mov >= 0.0);
    }

    #[test]
    fn total_loss_perfect_predictions_near_zero() {
        let sem_t = vec![0usize, 1, 2];
        let mov_t = vec![0usize, 1, 0];
        let tape = Tape::new();
        let sem = tape.leaf(logits_for(&sem_t, 3, 60.0));
        let mov = tape.leaf(logits_for(&mov_t, 2, 60.0));
        let (total, _) = total_loss(sem, mov, &sem_t, &mov_t).unwrap();
        assert!(total.item().unwrap() < 1e-6);
    }
}

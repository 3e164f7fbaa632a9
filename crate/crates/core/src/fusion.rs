//! Prediction heads and adaptive prediction fusion: per-point confidence
//! scores blend the point-branch and cluster-branch logits convexly.

use crate::backbone::Binder;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Var};

/// Head and confidence-MLP sizing.
#[derive(Debug, Clone, Copy)]
pub struct HeadConfig {
    pub d: usize,
    pub c_sem: usize,
    pub c_mov: usize,
}

/// The four heads share no weights; confidences get their own MLPs.
pub fn ensure_params(store: &mut ParamStore, cfg: &HeadConfig) -> Result<()> {
    for (branch, classes) in [
        ("point.sem", cfg.c_sem),
        ("point.mov", cfg.c_mov),
        ("cluster.sem", cfg.c_sem),
        ("cluster.mov", cfg.c_mov),
    ] {
        store.get_or_init(&format!("head.{branch}.w1"), &[cfg.d, cfg.d])?;
        store.get_or_zeros(&format!("head.{branch}.b1"), &[cfg.d])?;
        store.get_or_init(&format!("head.{branch}.w2"), &[cfg.d, classes])?;
        store.get_or_zeros(&format!("head.{branch}.b2"), &[classes])?;
    }
    for kind in ["sem", "mov"] {
        store.get_or_init(&format!("conf.{kind}.w1"), &[2 * cfg.d, cfg.d])?;
        store.get_or_zeros(&format!("conf.{kind}.b1"), &[cfg.d])?;
        store.get_or_init(&format!("conf.{kind}.w2"), &[cfg.d, 1])?;
        // gate starts nearly closed: fusion begins at the point branch and
        // opens where the cluster branch earns confidence
        if store.get(&format!("conf.{kind}.b2")).is_none() {
            store.set(
                &format!("conf.{kind}.b2"),
                crate::tensor::Tensor::new(vec![1], vec![-3.0])?,
            );
        }
    }
    Ok(())
}

/// Two-layer MLP head producing per-point class logits.
pub fn prediction_head<'t>(
    binder: &Binder<'t, '_>,
    features: Var<'t>,
    head: &str,
) -> Result<Var<'t>> {
    features
        .linear(
            &binder.var(&format!("head.{head}.w1"))?,
            &binder.var(&format!("head.{head}.b1"))?,
        )?
        .tanh()?
        .linear(
            &binder.var(&format!("head.{head}.w2"))?,
            &binder.var(&format!("head.{head}.b2"))?,
        )
}

/// Per-point confidence scores in (0,1) from the channel concatenation of
/// the two branches' features; semantic and motion confidences come from
/// MLPs that share no weights.
pub fn confidence<'t>(
    binder: &Binder<'t, '_>,
    h_point: Var<'t>,
    h_cluster: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if h_point.dims() != h_cluster.dims() {
        return Err(Error::data(format!(
            "confidence: branch shapes differ: {:?} vs {:?}",
            h_point.dims(),
            h_cluster.dims()
        )));
    }
    let joined = h_point.concat_cols(&h_cluster)?;
    let one = |kind: &str| -> Result<Var<'t>> {
        joined
            .linear(
                &binder.var(&format!("conf.{kind}.w1"))?,
                &binder.var(&format!("conf.{kind}.b1"))?,
            )?
            .tanh()?
            .linear(
                &binder.var(&format!("conf.{kind}.w2"))?,
                &binder.var(&format!("conf.{kind}.b2"))?,
            )?
            .sigmoid()
    };
    Ok((one("sem")?, one("mov")?))
}

/// Convex blend of branch logits: `(1 - s) * point + s * cluster`, with the
/// per-point score broadcast over the class axis.
pub fn apf_fuse<'t>(point: Var<'t>, cluster: Var<'t>, score: Var<'t>) -> Result<Var<'t>> {
    let complement = score.affine(-1.0, 1.0)?;
    point.mul_col(&complement)?.add(&cluster.mul_col(&score)?)
}

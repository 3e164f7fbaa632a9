//! Pipeline assembly: sample construction from labeled frames, the dual-branch
//! forward pass, two-stage training, sequential inference and evaluation.
//!
//! The point branch stacks pose-aligned scans, downsamples, extracts features
//! and (after stage one) enriches them with the previous frame's features.
//! The cluster branch transfers the previous frame's predictions onto the
//! current points, clusters foreground evidence over the stacked cloud, runs
//! grouped attention over the merged cluster pool and scatters the result
//! back to points. Confidence-weighted fusion blends the two branches'
//! logits per point.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use crate::backbone::{backbone_forward, BackboneConfig, Binder};
use crate::cluster::{cluster_centers, dbscan, filter_foreground, ClusterSet};
use crate::cluster_branch::{
    aggregate_instance, merge_temporal_clusters, scatter_cluster_feats, tce_attention,
    ClusterFeatures, TceConfig,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{apf_fuse, confidence, prediction_head, HeadConfig};
use crate::labels::{transfer_labels, CoarseLabel, HistoryFrame};
use crate::loss::total_loss;
use crate::metrics::{compute_iou, consistency_metric, ConfusionMatrix, MetricsReport};
use crate::mtf::{mtf_forward, MtfConfig, TemporalFeatureState};
use crate::pointcloud::{
    stack_scans, transform_points, voxel_downsample_indices, voxel_key, Pose, StackedCloud,
};
use crate::synth::LabeledFrame;
use crate::tensor::{AdamW, ParamStore, Tape, Tensor, Var};

/// Pipeline wrapper owning the configuration.
pub struct Model {
    pub cfg: PipelineConfig,
}

impl Model {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    pub fn backbone_cfg(&self) -> BackboneConfig {
        BackboneConfig {
            d: self.cfg.d_model,
            layers: self.cfg.layers,
            knn_k: self.cfg.knn_k,
            rho: self.cfg.rho,
            max_grid: self.cfg.max_grid,
        }
    }

    pub fn mtf_cfg(&self) -> MtfConfig {
        MtfConfig {
            d: self.cfg.d_model,
            rho: self.cfg.mtf_rho,
            max_grid: self.cfg.max_grid,
        }
    }

    pub fn tce_cfg(&self) -> TceConfig {
        TceConfig {
            d: self.cfg.d_model,
            groups: self.cfg.groups,
            k_nn: self.cfg.tce_knn,
        }
    }

    pub fn head_cfg(&self) -> HeadConfig {
        HeadConfig {
            d: self.cfg.d_model,
            c_sem: self.cfg.c_sem(),
            c_mov: self.cfg.c_mov(),
        }
    }

    /// Instantiate every parameter plus checkpoint metadata.
    pub fn ensure_params(&self, store: &mut ParamStore) -> Result<()> {
        crate::backbone::ensure_params(store, &self.backbone_cfg())?;
        crate::mtf::ensure_params(store, &self.mtf_cfg())?;
        crate::cluster_branch::ensure_params(store, &self.tce_cfg())?;
        crate::fusion::ensure_params(store, &self.head_cfg())?;
        let meta = [
            self.cfg.d_model as f64,
            self.cfg.c_sem() as f64,
            self.cfg.c_mov() as f64,
        ];
        if store.get("meta.arch").is_none() {
            store.set("meta.arch", Tensor::new(vec![3], meta.to_vec())?);
        }
        if store.get("meta.progress").is_none() {
            store.set("meta.progress", Tensor::new(vec![2], vec![0.0, 0.0])?);
        }
        Ok(())
    }

    /// Check a loaded checkpoint against this configuration.
    pub fn check_compat(&self, store: &ParamStore) -> Result<()> {
        let meta = store
            .get("meta.arch")
            .ok_or_else(|| Error::data("checkpoint has no architecture metadata".to_string()))?;
        let want = [
            self.cfg.d_model as f64,
            self.cfg.c_sem() as f64,
            self.cfg.c_mov() as f64,
        ];
        if meta.data() != want {
            return Err(Error::data(format!(
                "incompatible checkpoint: arch {:?} vs config {:?}",
                meta.data(),
                want
            )));
        }
        Ok(())
    }
}

/// Epochs already completed, persisted in the checkpoint.
pub fn training_progress(store: &ParamStore) -> (usize, usize) {
    match store.get("meta.progress") {
        Some(t) if t.numel() == 2 => (t.data()[0] as usize, t.data()[1] as usize),
        _ => (0, 0),
    }
}

fn set_progress(store: &mut ParamStore, stage1: usize, stage2: usize) {
    store.set(
        "meta.progress",
        Tensor::new(vec![2], vec![stage1 as f64, stage2 as f64]).expect("finite"),
    );
}

/// One network input: the downsampled stacked cloud with aligned targets and
/// provenance.
pub struct Sample {
    pub frame: usize,
    pub cloud: StackedCloud,
    pub coords: Vec<[f64; 3]>,
    pub sem_target: Vec<usize>,
    pub mov_target: Vec<usize>,
    pub instance: Vec<i32>,
    /// Source frame index of every downsampled point.
    pub source_frame: Vec<usize>,
    /// Original in-scan index of every downsampled point.
    pub source_index: Vec<usize>,
    /// Downsampled row serving each original current-scan point.
    pub current_rep: Vec<usize>,
    /// Sensor-to-world pose of the current frame.
    pub pose: Pose,
}

/// Build the stacked, downsampled sample for frame `t`.
pub fn build_sample(frames: &[LabeledFrame], t: usize, cfg: &PipelineConfig) -> Result<Sample> {
    if t >= frames.len() {
        return Err(Error::data(format!(
            "frame {t} out of range {}",
            frames.len()
        )));
    }
    // window t - stride*history ..= t, oldest first
    let mut window = Vec::new();
    let mut i = t as isize;
    while window.len() < cfg.history + 1 && i >= 0 {
        window.push(i as usize);
        i -= cfg.temporal_stride as isize;
    }
    window.reverse();

    let current_pose_inv = frames[t].pose.inverse();
    let mut scans = Vec::new();
    let mut poses = Vec::new();
    for &f in &window {
        scans.push(frames[f].scan.clone());
        poses.push(current_pose_inv.compose(&frames[f].pose));
    }
    let stacked = stack_scans(&scans, &poses, t)?;

    // provenance of each stacked point: (source frame, original index)
    let mut provenance = Vec::with_capacity(stacked.len());
    for &f in &window {
        for orig in 0..frames[f].scan.points.len() {
            provenance.push((f, orig));
        }
    }

    let (cloud, kept) = voxel_downsample_indices(&stacked, cfg.voxel_cell)?;

    let mut sem_target = Vec::with_capacity(cloud.len());
    let mut mov_target = Vec::with_capacity(cloud.len());
    let mut instance = Vec::with_capacity(cloud.len());
    let mut source_frame = Vec::with_capacity(cloud.len());
    let mut source_index = Vec::with_capacity(cloud.len());
    for &idx in &kept {
        let (f, orig) = provenance[idx];
        let fine = frames[f].sem[orig];
        let sem = cfg
            .class_index(fine)
            .ok_or_else(|| Error::data(format!("fine class {fine} not in configured class_ids")))?;
        sem_target.push(sem);
        mov_target.push(frames[f].motion[orig].min(1) as usize);
        instance.push(frames[f].instance[orig]);
        source_frame.push(f);
        source_index.push(orig);
    }

    // representative row per original current-scan point, via the voxel keys
    // of the stacked coordinates
    let mut key_to_row = HashMap::with_capacity(kept.len());
    for (row, &idx) in kept.iter().enumerate() {
        key_to_row.insert(voxel_key(stacked.points[idx].coords(), cfg.voxel_cell), row);
    }
    let base = stacked.len() - frames[t].scan.points.len();
    let mut current_rep = Vec::with_capacity(frames[t].scan.points.len());
    for orig in 0..frames[t].scan.points.len() {
        let key = voxel_key(stacked.points[base + orig].coords(), cfg.voxel_cell);
        let row = key_to_row
            .get(&key)
            .copied()
            .ok_or_else(|| Error::data(format!("no voxel representative for point {orig}")))?;
        current_rep.push(row);
    }

    let coords = cloud.points.iter().map(|p| p.coords()).collect();
    Ok(Sample {
        frame: t,
        cloud,
        coords,
        sem_target,
        mov_target,
        instance,
        source_frame,
        source_index,
        current_rep,
        pose: frames[t].pose,
    })
}

/// Which optional branches run.
#[derive(Debug, Clone, Copy)]
pub struct BranchOptions {
    pub cluster: bool,
    pub mtf: bool,
    /// Detach backbone output from the tape (used when it is frozen).
    pub detach_backbone: bool,
}

/// Sequential state carried from frame to frame during stage-2 training and
/// inference. Everything stored here is detached from any tape.
#[derive(Default)]
pub struct FrameState {
    pub temporal: Option<TemporalFeatureState>,
    pub prev_clusters: Option<ClusterFeatures>,
    /// Predicted fine ids for recent full scans, oldest first.
    pub predictions: VecDeque<(usize, Vec<u16>)>,
    pub prev_pose: Option<Pose>,
}

impl FrameState {
    pub fn new() -> Self {
        FrameState::default()
    }
}

/// Everything the forward pass produces for one frame.
pub struct ForwardOutput<'t> {
    pub h_point: Var<'t>,
    pub h_cluster: Option<Var<'t>>,
    pub sem_point: Var<'t>,
    pub mov_point: Var<'t>,
    pub sem_final: Var<'t>,
    pub mov_final: Var<'t>,
    /// Clusters over the downsampled points (after foreground filtering).
    pub clusters: ClusterSet,
    pub centers: Vec<[f64; 3]>,
    /// Initial (pre-attention) cluster features, already detached.
    pub cluster_features: Option<Tensor>,
    /// Coarse labels of the downsampled points used for cluster selection.
    pub coarse: Vec<CoarseLabel>,
    pub network_ms: f64,
    pub cluster_ms: f64,
}

/// Generate coarse labels for every downsampled point. Past points take the
/// coarse bucket of their own frame's stored prediction directly; current
/// points get the two-pass voxel-voting transfer from the most recent
/// prediction. Points without any prediction source stay unlabeled (they are
/// still clustered, which is how new and moving geometry enters).
fn coarse_labels_for_sample(
    model: &Model,
    frames: &[LabeledFrame],
    sample: &Sample,
    state: &FrameState,
) -> Result<Vec<CoarseLabel>> {
    let cfg = &model.cfg;
    let map = cfg.class_map();
    let n = sample.cloud.len();
    let mut labels = vec![CoarseLabel::Unlabeled; n];
    let pred_of: HashMap<usize, &Vec<u16>> =
        state.predictions.iter().map(|(f, p)| (*f, p)).collect();

    let mut current_rows = Vec::new();
    for row in 0..n {
        let f = sample.source_frame[row];
        if f == sample.frame {
            current_rows.push(row);
        } else if let Some(pred) = pred_of.get(&f) {
            let fine = pred[sample.source_index[row]];
            if let Some(coarse) = map.get(fine) {
                labels[row] = coarse;
            }
        }
    }

    // transfer onto the current-frame points from the most recent prediction
    let Some((hist_frame, fine)) = state.predictions.back() else {
        return Ok(labels); // first frame: everything stays unlabeled
    };
    let into_now = sample.pose.inverse().compose(&frames[*hist_frame].pose);
    let moved = transform_points(&frames[*hist_frame].scan.points, &into_now)?;
    let history_points: Vec<[f64; 3]> = moved.iter().map(|p| p.coords()).collect();
    let current_points: Vec<crate::pointcloud::Point5> = current_rows
        .iter()
        .map(|&row| sample.cloud.points[row])
        .collect();
    let history = HistoryFrame {
        points: &history_points,
        fine_labels: fine,
    };
    let transferred = transfer_labels(&current_points, &[history], &map, &cfg.transfer_config())?;
    for (slot, &row) in current_rows.iter().enumerate() {
        labels[row] = transferred[slot];
    }
    Ok(labels)
}

/// Full dual-branch forward pass for one frame.
pub fn forward_frame<'t>(
    binder: &Binder<'t, '_>,
    model: &Model,
    frames: &[LabeledFrame],
    sample: &Sample,
    state: &FrameState,
    opts: &BranchOptions,
) -> Result<ForwardOutput<'t>> {
    let cfg = &model.cfg;
    let tape = binder.tape();
    let n = sample.cloud.len();

    let net_start = Instant::now();
    let mut f_t = backbone_forward(binder, &sample.cloud, &model.backbone_cfg())?;
    if opts.detach_backbone {
        f_t = tape.leaf(f_t.value());
    }

    let pose_prev_to_now = match state.prev_pose {
        Some(prev) => sample.pose.inverse().compose(&prev),
        None => Pose::identity(),
    };

    let h_t = if opts.mtf {
        mtf_forward(
            binder,
            f_t,
            &sample.coords,
            state.temporal.as_ref(),
            &pose_prev_to_now,
            &model.mtf_cfg(),
        )?
    } else {
        f_t
    };

    let sem_point = prediction_head(binder, h_t, "point.sem")?;
    let mov_point = prediction_head(binder, h_t, "point.mov")?;
    let mut network_ms = net_start.elapsed().as_secs_f64() * 1e3;

    if !opts.cluster {
        return Ok(ForwardOutput {
            h_point: h_t,
            h_cluster: None,
            sem_point,
            mov_point,
            sem_final: sem_point,
            mov_final: mov_point,
            clusters: ClusterSet::empty(n),
            centers: Vec::new(),
            cluster_features: None,
            coarse: vec![CoarseLabel::Unlabeled; n],
            network_ms,
            cluster_ms: 0.0,
        });
    }

    // --- cluster label generation (geometry only) ---
    let cluster_start = Instant::now();
    let coarse = coarse_labels_for_sample(model, frames, sample, state)?;
    let selected: Vec<usize> = (0..n)
        .filter(|&i| matches!(coarse[i], CoarseLabel::Foreground | CoarseLabel::Unlabeled))
        .collect();
    let sel_coords: Vec<[f64; 3]> = selected.iter().map(|&i| sample.coords[i]).collect();
    let sel_clusters = dbscan(&sel_coords, cfg.dbscan_eps, cfg.dbscan_min_pts)?;
    let sel_labels: Vec<CoarseLabel> = selected.iter().map(|&i| coarse[i]).collect();
    let filtered = filter_foreground(&sel_clusters, &sel_labels)?;
    // remap the subset clustering onto the full point set
    let mut assignment = vec![-1i32; n];
    for (slot, &orig) in selected.iter().enumerate() {
        assignment[orig] = filtered.assignment[slot];
    }
    let members: Vec<Vec<usize>> = filtered
        .members
        .iter()
        .map(|m| m.iter().map(|&slot| selected[slot]).collect())
        .collect();
    let clusters = ClusterSet {
        assignment,
        members,
    };
    let centers = cluster_centers(&clusters, &sample.coords).centers;
    let cluster_ms = cluster_start.elapsed().as_secs_f64() * 1e3;

    // --- cluster feature branch ---
    let net2 = Instant::now();
    let (h_cluster, cluster_features) = if clusters.num_clusters() > 0 {
        let (u_t, g_t) = aggregate_instance(h_t, &clusters, &sample.coords)?;
        let u_detached = u_t.value();
        let (pool, pool_centers) =
            merge_temporal_clusters((u_t, &g_t), state.prev_clusters.as_ref(), &pose_prev_to_now)?;
        let enhanced = tce_attention(binder, (u_t, &g_t), (pool, &pool_centers), &model.tce_cfg())?;
        let h_c = scatter_cluster_feats(enhanced, &clusters, n)?;
        (h_c, Some(u_detached))
    } else {
        (tape.leaf(Tensor::zeros(vec![n, cfg.d_model])), None)
    };

    let sem_cluster = prediction_head(binder, h_cluster, "cluster.sem")?;
    let mov_cluster = prediction_head(binder, h_cluster, "cluster.mov")?;
    let (s_sem, s_mov) = confidence(binder, h_t, h_cluster)?;
    let sem_final = apf_fuse(sem_point, sem_cluster, s_sem)?;
    let mov_final = apf_fuse(mov_point, mov_cluster, s_mov)?;
    network_ms += net2.elapsed().as_secs_f64() * 1e3;

    Ok(ForwardOutput {
        h_point: h_t,
        h_cluster: Some(h_cluster),
        sem_point,
        mov_point,
        sem_final,
        mov_final,
        clusters,
        centers,
        cluster_features,
        coarse,
        network_ms,
        cluster_ms,
    })
}

/// Row-wise argmax of a rank-2 tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (n, c) = (t.dims()[0], t.dims()[1]);
    (0..n)
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Advance the sequential state after a frame: store detached features,
/// cluster snapshots and the full-scan predictions for label transfer.
pub fn advance_state(
    mut state: FrameState,
    model: &Model,
    sample: &Sample,
    h_point: Tensor,
    cluster_features: Option<(Tensor, Vec<[f64; 3]>)>,
    predicted_fine_full: Vec<u16>,
) -> Result<FrameState> {
    state.temporal = Some(TemporalFeatureState::new(sample.coords.clone(), h_point)?);
    state.prev_clusters = match cluster_features {
        Some((features, centers)) => Some(ClusterFeatures::new(features, centers)?),
        None => None,
    };
    state
        .predictions
        .push_back((sample.frame, predicted_fine_full));
    while state.predictions.len() > model.cfg.history.max(1) {
        state.predictions.pop_front();
    }
    state.prev_pose = Some(sample.pose);
    Ok(state)
}

/// Upsample downsampled-row predictions onto the full current scan and
/// convert semantic indices to fine ids.
pub fn upsample_predictions(
    model: &Model,
    sample: &Sample,
    sem_idx: &[usize],
    mov_idx: &[usize],
) -> (Vec<u16>, Vec<u16>) {
    let sem = sample
        .current_rep
        .iter()
        .map(|&row| model.cfg.class_ids[sem_idx[row]])
        .collect();
    let mov = sample
        .current_rep
        .iter()
        .map(|&row| mov_idx[row] as u16)
        .collect();
    (sem, mov)
}

// --- training ----------------------------------------------------------------

/// One metrics-log line per epoch.
#[derive(Debug, Clone)]
pub struct TrainLogEntry {
    pub stage: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_miou: f64,
}

impl TrainLogEntry {
    pub fn render(&self) -> String {
        format!(
            "stage {} epoch {:>3}  loss {:.4}  val_miou {:.4}",
            self.stage, self.epoch, self.mean_loss, self.val_miou
        )
    }
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

fn grads_with_prefixes(
    grads: std::collections::BTreeMap<String, Tensor>,
    prefixes: &[&str],
) -> std::collections::BTreeMap<String, Tensor> {
    grads
        .into_iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .collect()
}

/// Save a diagnostic dump next to the checkpoint path on numeric failure.
fn dump_on_numeric_failure(store: &ParamStore, checkpoint: Option<&Path>, context: &str) {
    if let Some(path) = checkpoint {
        let dump = path.with_extension("nan-dump.ckpt");
        if store.save(&dump).is_ok() {
            eprintln!(
                "numeric failure during {context}; state dumped to {}",
                dump.display()
            );
        }
    }
}

/// Two-stage training. Stage one trains the backbone and point heads on the
/// point branch alone; stage two freezes those and trains the temporal and
/// cluster modules plus fusion on the fused predictions, walking frames in
/// order with carried state. Training resumes from the progress stored in
/// the checkpoint; the checkpoint is rewritten after every epoch.
pub fn train(
    model: &Model,
    frames: &[LabeledFrame],
    store: &mut ParamStore,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    let cfg = &model.cfg;
    model.ensure_params(store)?;
    let train_end = cfg.train_frames.min(frames.len());
    if train_end == 0 {
        return Err(Error::data("no training frames".to_string()));
    }
    let val_range: Vec<usize> = if train_end < frames.len() {
        (train_end..frames.len()).collect()
    } else {
        (0..train_end).collect()
    };
    let mut log = Vec::new();
    let (done1, done2) = training_progress(store);

    let opt1 = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };

    // stage 1: point branch only
    for epoch in done1..cfg.epochs_stage1 {
        let order = shuffled_indices(train_end, cfg.seed ^ 0x51a6e1 ^ (epoch as u64) << 8);
        let mut loss_sum = 0.0;
        for &t in &order {
            let sample = build_sample(frames, t, cfg)?;
            let tape = Tape::new();
            let binder = Binder::new(&tape, store);
            let result = (|| -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
                let f_t = backbone_forward(&binder, &sample.cloud, &model.backbone_cfg())?;
                let sem = prediction_head(&binder, f_t, "point.sem")?;
                let mov = prediction_head(&binder, f_t, "point.mov")?;
                let (loss, report) = total_loss(sem, mov, &sample.sem_target, &sample.mov_target)?;
                let grads = tape.backward(loss)?;
                Ok((report.total, binder.grads_by_name(&grads)))
            })();
            let (loss_val, grads) = match result {
                Ok(v) => v,
                Err(e @ Error::Numeric(_)) => {
                    dump_on_numeric_failure(store, checkpoint, "stage 1");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss_val;
            let grads = grads_with_prefixes(grads, &["backbone.", "head.point."]);
            opt1.step(store, &grads)?;
        }
        let val_miou = validate_point_only(model, frames, store, &val_range)?;
        let entry = TrainLogEntry {
            stage: 1,
            epoch,
            mean_loss: loss_sum / train_end as f64,
            val_miou,
        };
        on_epoch(&entry);
        log.push(entry);
        set_progress(store, epoch + 1, 0);
        if let Some(path) = checkpoint {
            store.save(path)?;
        }
    }

    // stage 2: freeze backbone and point heads, train the residual modules
    let lr2 = if cfg.lr_stage2 > 0.0 {
        cfg.lr_stage2
    } else {
        cfg.lr
    };
    let opt2 = AdamW {
        lr: lr2,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let opts = BranchOptions {
        cluster: !cfg.disable_cluster_branch,
        mtf: !cfg.disable_mtf,
        detach_backbone: true,
    };
    for epoch in done2..cfg.epochs_stage2 {
        let mut state = FrameState::new();
        let mut loss_sum = 0.0;
        for t in 0..train_end {
            let sample = build_sample(frames, t, cfg)?;
            let tape = Tape::new();
            let binder = Binder::new(&tape, store);
            type StepOut = (
                f64,
                std::collections::BTreeMap<String, Tensor>,
                Tensor,
                Vec<u16>,
                Option<(Tensor, Vec<[f64; 3]>)>,
            );
            let step = (|| -> Result<StepOut> {
                let out = forward_frame(&binder, model, frames, &sample, &state, &opts)?;
                let (loss, report) = total_loss(
                    out.sem_final,
                    out.mov_final,
                    &sample.sem_target,
                    &sample.mov_target,
                )?;
                let grads = tape.backward(loss)?;
                let by_name = binder.grads_by_name(&grads);
                // the model's own fused predictions become next frame's history
                let sem_idx = argmax_rows(&out.sem_final.value());
                let mov_idx = argmax_rows(&out.mov_final.value());
                let (fine, _) = upsample_predictions(model, &sample, &sem_idx, &mov_idx);
                let clusters = out
                    .cluster_features
                    .clone()
                    .map(|f| (f, out.centers.clone()));
                Ok((report.total, by_name, out.h_point.value(), fine, clusters))
            })();
            let (loss_val, grads, h_values, fine, clusters) = match step {
                Ok(v) => v,
                Err(e @ Error::Numeric(_)) => {
                    dump_on_numeric_failure(store, checkpoint, "stage 2");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            state = advance_state(state, model, &sample, h_values, clusters, fine)?;
            loss_sum += loss_val;
            // heads are not part of the frozen backbone: they adapt to the
            // temporally fused features alongside the new modules
            let grads = grads_with_prefixes(grads, &["mtf.", "tce.", "head.", "conf."]);
            opt2.step(store, &grads)?;
        }
        let val_miou = validate_full(model, frames, store, &val_range)?;
        let entry = TrainLogEntry {
            stage: 2,
            epoch,
            mean_loss: loss_sum / train_end as f64,
            val_miou,
        };
        on_epoch(&entry);
        log.push(entry);
        set_progress(store, cfg.epochs_stage1.max(done1), epoch + 1);
        if let Some(path) = checkpoint {
            store.save(path)?;
        }
    }
    Ok(TrainOutcome { log })
}

fn validate_point_only(
    model: &Model,
    frames: &[LabeledFrame],
    store: &ParamStore,
    val: &[usize],
) -> Result<f64> {
    let mut confusion = ConfusionMatrix::new(model.cfg.c_sem());
    for &t in val {
        let sample = build_sample(frames, t, &model.cfg)?;
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let f_t = backbone_forward(&binder, &sample.cloud, &model.backbone_cfg())?;
        let sem = prediction_head(&binder, f_t, "point.sem")?;
        confusion.add(&argmax_rows(&sem.value()), &sample.sem_target)?;
    }
    Ok(compute_iou(&confusion)?.miou)
}

fn validate_full(
    model: &Model,
    frames: &[LabeledFrame],
    store: &ParamStore,
    val: &[usize],
) -> Result<f64> {
    let opts = BranchOptions {
        cluster: !model.cfg.disable_cluster_branch,
        mtf: !model.cfg.disable_mtf,
        detach_backbone: true,
    };
    let mut state = FrameState::new();
    let mut confusion = ConfusionMatrix::new(model.cfg.c_sem());
    for &t in val {
        let sample = build_sample(frames, t, &model.cfg)?;
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let out = forward_frame(&binder, model, frames, &sample, &state, &opts)?;
        let sem_idx = argmax_rows(&out.sem_final.value());
        let mov_idx = argmax_rows(&out.mov_final.value());
        confusion.add(&sem_idx, &sample.sem_target)?;
        let (fine, _) = upsample_predictions(model, &sample, &sem_idx, &mov_idx);
        state = advance_state(
            state,
            model,
            &sample,
            out.h_point.value(),
            out.cluster_features
                .clone()
                .map(|f| (f, out.centers.clone())),
            fine,
        )?;
    }
    Ok(compute_iou(&confusion)?.miou)
}

// --- inference ---------------------------------------------------------------

/// Per-frame wall-clock split between the network and cluster-label stages.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StageTiming {
    pub frame: usize,
    pub network_ms: f64,
    pub cluster_label_ms: f64,
}

pub struct InferenceOutput {
    /// Per frame: (fine semantic id, motion id) for every original scan point.
    pub predictions: Vec<(Vec<u16>, Vec<u16>)>,
    pub timings: Vec<StageTiming>,
    /// Per frame: cluster id per original scan point (-1 noise/unclustered).
    pub cluster_ids: Vec<Vec<i32>>,
    /// Per frame: coarse transfer label per original scan point.
    pub coarse: Vec<Vec<u8>>,
}

/// Closed-loop sequential inference over a scan sequence. With
/// `oracle_history` the label transfer consumes ground-truth history labels
/// instead of the model's own previous predictions.
pub fn infer(
    model: &Model,
    frames: &[LabeledFrame],
    store: &ParamStore,
) -> Result<InferenceOutput> {
    let cfg = &model.cfg;
    model.check_compat(store)?;
    let opts = BranchOptions {
        cluster: !cfg.disable_cluster_branch,
        mtf: !cfg.disable_mtf,
        detach_backbone: true,
    };
    let mut state = FrameState::new();
    let mut predictions = Vec::with_capacity(frames.len());
    let mut timings = Vec::with_capacity(frames.len());
    let mut cluster_ids = Vec::with_capacity(frames.len());
    let mut coarse_dump = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let sample = build_sample(frames, t, cfg)?;
        let tape = Tape::new();
        let binder = Binder::new(&tape, store);
        let out = forward_frame(&binder, model, frames, &sample, &state, &opts)?;
        let sem_idx = argmax_rows(&out.sem_final.value());
        let mov_idx = argmax_rows(&out.mov_final.value());
        let (fine, motion) = upsample_predictions(model, &sample, &sem_idx, &mov_idx);
        cluster_ids.push(
            sample
                .current_rep
                .iter()
                .map(|&row| out.clusters.assignment[row])
                .collect(),
        );
        coarse_dump.push(
            sample
                .current_rep
                .iter()
                .map(|&row| out.coarse[row].index() as u8)
                .collect(),
        );
        timings.push(StageTiming {
            frame: t,
            network_ms: out.network_ms,
            cluster_label_ms: out.cluster_ms,
        });
        let history_fine = if cfg.oracle_history {
            frames[t].sem.clone()
        } else {
            fine.clone()
        };
        state = advance_state(
            state,
            model,
            &sample,
            out.h_point.value(),
            out.cluster_features
                .clone()
                .map(|f| (f, out.centers.clone())),
            history_fine,
        )?;
        predictions.push((fine, motion));
    }
    Ok(InferenceOutput {
        predictions,
        timings,
        cluster_ids,
        coarse: coarse_dump,
    })
}

// --- evaluation --------------------------------------------------------------

/// Compare per-point predictions against ground truth over full scans.
pub fn evaluate(
    model: &Model,
    predictions: &[(Vec<u16>, Vec<u16>)],
    gt: &[LabeledFrame],
    wall_ms: f64,
) -> Result<MetricsReport> {
    let cfg = &model.cfg;
    if predictions.len() != gt.len() {
        return Err(Error::data(format!(
            "evaluate: {} prediction frames vs {} ground-truth frames",
            predictions.len(),
            gt.len()
        )));
    }
    let mut sem_confusion = ConfusionMatrix::new(cfg.c_sem());
    let mut mov_confusion = ConfusionMatrix::new(cfg.c_mov());
    let mut consistency_num = 0.0;
    let mut consistency_den = 0.0;
    let mut points = 0u64;
    for ((sem_pred, mov_pred), frame) in predictions.iter().zip(gt) {
        if sem_pred.len() != frame.scan.points.len() {
            return Err(Error::data(format!(
                "frame {}: {} predictions for {} points",
                frame.scan.frame_index,
                sem_pred.len(),
                frame.scan.points.len()
            )));
        }
        let pred_idx: Vec<usize> = sem_pred
            .iter()
            .map(|&f| {
                cfg.class_index(f)
                    .ok_or_else(|| Error::data(format!("unknown class {f}")))
            })
            .collect::<Result<_>>()?;
        let gt_idx: Vec<usize> = frame
            .sem
            .iter()
            .map(|&f| {
                cfg.class_index(f)
                    .ok_or_else(|| Error::data(format!("unknown class {f}")))
            })
            .collect::<Result<_>>()?;
        sem_confusion.add(&pred_idx, &gt_idx)?;
        let mov_idx: Vec<usize> = mov_pred.iter().map(|&m| (m as usize).min(1)).collect();
        let gt_mov: Vec<usize> = frame.motion.iter().map(|&m| (m as usize).min(1)).collect();
        mov_confusion.add(&mov_idx, &gt_mov)?;
        if let Some(c) = consistency_metric(&pred_idx, &frame.instance)? {
            let instances: std::collections::HashSet<i32> =
                frame.instance.iter().copied().filter(|&i| i >= 0).collect();
            consistency_num += c * instances.len() as f64;
            consistency_den += instances.len() as f64;
        }
        points += frame.scan.points.len() as u64;
    }
    let iou = compute_iou(&sem_confusion)?;
    let iou_moving = mov_confusion.iou_of(cfg.moving_index());
    Ok(MetricsReport {
        class_ids: cfg.class_ids.clone(),
        per_class_iou: iou.per_class,
        miou: iou.miou,
        iou_moving,
        consistency: if consistency_den > 0.0 {
            Some(consistency_num / consistency_den)
        } else {
            None
        },
        frames: gt.len(),
        points,
        wall_ms,
    })
}

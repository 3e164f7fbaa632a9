//! Cluster-branch feature path: per-cluster aggregation of point features,
//! temporal merging of cluster sets, grouped vector attention over KNN
//! cluster neighborhoods, and scatter-back to points.

use crate::backbone::Binder;
use crate::cluster::{cluster_centers, ClusterSet};
use crate::error::{Error, Result};
use crate::pointcloud::{transform_points, Point5, Pose};
use crate::tensor::{ParamStore, Tensor, Var};

/// A frame's cluster features and centers, as plain values (used to carry
/// the previous frame's clusters without backpropagation through time).
#[derive(Debug, Clone)]
pub struct ClusterFeatures {
    pub features: Tensor,
    pub centers: Vec<[f64; 3]>,
}

impl ClusterFeatures {
    pub fn new(features: Tensor, centers: Vec<[f64; 3]>) -> Result<Self> {
        if features.dims().len() != 2 || features.dims()[0] != centers.len() {
            return Err(Error::shape(format!(
                "cluster features {:?} vs {} centers",
                features.dims(),
                centers.len()
            )));
        }
        Ok(ClusterFeatures { features, centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Attention hyperparameters; `d` must be divisible by `groups`.
#[derive(Debug, Clone, Copy)]
pub struct TceConfig {
    pub d: usize,
    pub groups: usize,
    pub k_nn: usize,
}

impl TceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.groups > self.d || self.d % self.groups != 0 {
            return Err(Error::config(format!(
                "attention groups {} must divide feature width {}",
                self.groups, self.d
            )));
        }
        if self.k_nn == 0 {
            return Err(Error::config(
                "attention k_nn must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

pub fn ensure_params(store: &mut ParamStore, cfg: &TceConfig) -> Result<()> {
    cfg.validate()?;
    for proj in ["q", "k", "v"] {
        store.get_or_init(&format!("tce.{proj}.w"), &[cfg.d, cfg.d])?;
        store.get_or_zeros(&format!("tce.{proj}.b"), &[cfg.d])?;
    }
    store.get_or_init("tce.omega.w", &[cfg.d, cfg.groups])?;
    store.get_or_zeros("tce.omega.b", &[cfg.groups])?;
    store.get_or_init("tce.delta.w1", &[3, cfg.d])?;
    store.get_or_zeros("tce.delta.b1", &[cfg.d])?;
    store.get_or_init("tce.delta.w2", &[cfg.d, cfg.d])?;
    store.get_or_zeros("tce.delta.b2", &[cfg.d])?;
    Ok(())
}

/// Average the point features of each cluster; returns the feature matrix
/// (rows aligned with cluster ids) and the cluster centers.
pub fn aggregate_instance<'t>(
    point_features: Var<'t>,
    clusters: &ClusterSet,
    coords: &[[f64; 3]],
) -> Result<(Var<'t>, Vec<[f64; 3]>)> {
    if clusters.members.iter().any(|m| m.is_empty()) {
        return Err(Error::data("aggregate_instance: empty cluster".to_string()));
    }
    let u = point_features.segment_mean(&clusters.assignment, clusters.num_clusters())?;
    let centers = cluster_centers(clusters, coords).centers;
    Ok((u, centers))
}

/// Concatenate the current clusters with the previous frame's clusters
/// transformed into the current coordinate system.
pub fn merge_temporal_clusters<'t>(
    current: (Var<'t>, &[[f64; 3]]),
    prev: Option<&ClusterFeatures>,
    pose_prev_to_now: &Pose,
) -> Result<(Var<'t>, Vec<[f64; 3]>)> {
    let (u_now, centers_now) = current;
    let tape = u_now.tape;
    match prev {
        None => Ok((u_now, centers_now.to_vec())),
        Some(p) if p.is_empty() => Ok((u_now, centers_now.to_vec())),
        Some(p) => {
            let pts: Vec<Point5> = p
                .centers
                .iter()
                .map(|&[x, y, z]| Point5::new(x, y, z, 0.0))
                .collect();
            let moved = transform_points(&pts, pose_prev_to_now)?;
            let mut centers = centers_now.to_vec();
            centers.extend(moved.iter().map(|m| m.coords()));
            let prev_var = tape.leaf(p.features.clone());
            let merged = tape.concat_rows(&[u_now, prev_var])?;
            Ok((merged, centers))
        }
    }
}

/// Nearest pool entries to `center` by (squared distance, index).
fn knn_pool(center: [f64; 3], pool: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let d2 = |j: usize| {
        let dx = pool[j][0] - center[0];
        let dy = pool[j][1] - center[1];
        let dz = pool[j][2] - center[2];
        dx * dx + dy * dy + dz * dz
    };
    order.sort_by(|&a, &b| {
        d2(a)
            .partial_cmp(&d2(b))
            .expect("finite centers")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(pool.len()));
    order
}

/// Grouped vector attention of each current cluster over its nearest
/// neighbors in the merged pool.
///
/// Per neighbor, a grouped weight vector is encoded from the key/query
/// difference plus a learned positional term of the relative center offset;
/// softmax over the neighbor axis per group produces the mixing weights for
/// that group's value channels.
pub fn tce_attention<'t>(
    binder: &Binder<'t, '_>,
    current: (Var<'t>, &[[f64; 3]]),
    pool: (Var<'t>, &[[f64; 3]]),
    cfg: &TceConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let (u_now, centers_now) = current;
    let (u_pool, centers_pool) = pool;
    if centers_pool.is_empty() {
        return Err(Error::data("tce_attention: empty cluster pool".to_string()));
    }
    let d = cfg.d;
    let group_size = d / cfg.groups;
    let tape = binder.tape();

    let q_all = u_now.linear(&binder.var("tce.q.w")?, &binder.var("tce.q.b")?)?;
    let k_all = u_pool.linear(&binder.var("tce.k.w")?, &binder.var("tce.k.b")?)?;
    let v_all = u_pool.linear(&binder.var("tce.v.w")?, &binder.var("tce.v.b")?)?;

    let n_now = centers_now.len();
    let mut outputs = Vec::with_capacity(n_now);
    for i in 0..n_now {
        let neighbors = knn_pool(centers_now[i], centers_pool, cfg.k_nn);
        let keys = k_all.gather_rows(&neighbors)?;
        let values = v_all.gather_rows(&neighbors)?;
        let query = q_all.gather_rows(&[i])?;
        // relative center offsets feed the positional encoder
        let rel: Vec<f64> = neighbors
            .iter()
            .flat_map(|&j| (0..3).map(move |a| centers_pool[j][a] - centers_now[i][a]))
            .collect();
        let rel = tape.leaf(Tensor::new(vec![neighbors.len(), 3], rel)?);
        let pos = rel
            .linear(&binder.var("tce.delta.w1")?, &binder.var("tce.delta.b1")?)?
            .tanh()?
            .linear(&binder.var("tce.delta.w2")?, &binder.var("tce.delta.b2")?)?;
        let pre = keys.sub_bcast_row(&query)?.add(&pos)?;
        let w = pre.linear(&binder.var("tce.omega.w")?, &binder.var("tce.omega.b")?)?;
        let attn = w.softmax(0)?; // normalize over neighbors per group
        let weighted = attn.repeat_group_cols(group_size)?.mul(&values)?;
        outputs.push(weighted.sum_rows()?);
    }
    tape.concat_rows(&outputs)
}

/// Distribute per-cluster features back onto points: clustered points take
/// their cluster's row, the rest zero rows.
pub fn scatter_cluster_feats<'t>(
    cluster_features: Var<'t>,
    clusters: &ClusterSet,
    n_points: usize,
) -> Result<Var<'t>> {
    if clusters.assignment.len() != n_points {
        return Err(Error::data(format!(
            "scatter_cluster_feats: {} assignments for {} points",
            clusters.assignment.len(),
            n_points
        )));
    }
    let n_c = cluster_features.dims()[0];
    let ids: Vec<Option<usize>> = clusters
        .assignment
        .iter()
        .map(|&a| {
            if a < 0 {
                Ok(None)
            } else if (a as usize) < n_c {
                Ok(Some(a as usize))
            } else {
                Err(Error::data(format!("cluster id {a} out of range {n_c}")))
            }
        })
        .collect::<Result<_>>()?;
    cluster_features.gather_rows_or_zero(&ids)
}

/// Direct evaluation of the grouped-vector-attention equations with plain
/// loops, sharing no code with the tape path. Used as a test oracle.
pub fn tce_reference(
    u_now: &Tensor,
    centers_now: &[[f64; 3]],
    u_pool: &Tensor,
    centers_pool: &[[f64; 3]],
    store: &ParamStore,
    cfg: &TceConfig,
) -> Result<Tensor> {
    let d = cfg.d;
    let gs = d / cfg.groups;
    let g = |name: &str| -> Result<&Tensor> {
        store
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))
    };
    let linear = |x: &[f64], w: &Tensor, b: &Tensor, di: usize, dout: usize| -> Vec<f64> {
        let mut out = vec![0.0; dout];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = b.data()[j];
            for i in 0..di {
                s += x[i] * w.data()[i * dout + j];
            }
            *o = s;
        }
        out
    };
    let (wq, bq) = (g("tce.q.w")?, g("tce.q.b")?);
    let (wk, bk) = (g("tce.k.w")?, g("tce.k.b")?);
    let (wv, bv) = (g("tce.v.w")?, g("tce.v.b")?);
    let (ww, bw) = (g("tce.omega.w")?, g("tce.omega.b")?);
    let (wd1, bd1) = (g("tce.delta.w1")?, g("tce.delta.b1")?);
    let (wd2, bd2) = (g("tce.delta.w2")?, g("tce.delta.b2")?);

    let mut out = vec![0.0; centers_now.len() * d];
    for i in 0..centers_now.len() {
        let q = linear(u_now.row(i), wq, bq, d, d);
        let neighbors = knn_pool(centers_now[i], centers_pool, cfg.k_nn);
        // weights per neighbor per group
        let mut w_mat = vec![0.0; neighbors.len() * cfg.groups];
        let mut v_mat = vec![0.0; neighbors.len() * d];
        for (r, &j) in neighbors.iter().enumerate() {
            let key = linear(u_pool.row(j), wk, bk, d, d);
            let val = linear(u_pool.row(j), wv, bv, d, d);
            v_mat[r * d..(r + 1) * d].copy_from_slice(&val);
            let rel = [
                centers_pool[j][0] - centers_now[i][0],
                centers_pool[j][1] - centers_now[i][1],
                centers_pool[j][2] - centers_now[i][2],
            ];
            let hidden: Vec<f64> = linear(&rel, wd1, bd1, 3, d)
                .iter()
                .map(|v| v.tanh())
                .collect();
            let pos = linear(&hidden, wd2, bd2, d, d);
            let pre: Vec<f64> = (0..d).map(|a| key[a] - q[a] + pos[a]).collect();
            let w_row = linear(&pre, ww, bw, d, cfg.groups);
            w_mat[r * cfg.groups..(r + 1) * cfg.groups].copy_from_slice(&w_row);
        }
        // softmax over the neighbor axis per group
        for l in 0..cfg.groups {
            let max = (0..neighbors.len())
                .map(|r| w_mat[r * cfg.groups + l])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in 0..neighbors.len() {
                let e = (w_mat[r * cfg.groups + l] - max).exp();
                w_mat[r * cfg.groups + l] = e;
                sum += e;
            }
            for r in 0..neighbors.len() {
                w_mat[r * cfg.groups + l] /= sum;
            }
        }
        // grouped weighted sum of values
        for l in 0..cfg.groups {
            for m in 0..gs {
                let ch = l * gs + m;
                let mut s = 0.0;
                for r in 0..neighbors.len() {
                    s += w_mat[r * cfg.groups + l] * v_mat[r * d + ch];
                }
                out[i * d + ch] = s;
            }
        }
    }
    Tensor::new(vec![centers_now.len(), d], out)
}

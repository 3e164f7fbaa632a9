//! Point-feature backbone: a KNN + shared-MLP local embedding followed by
//! rounds of project/convolve/back-project token mixing that cycle the three
//! axis-aligned planes.

use crate::error::{Error, Result};
use crate::pointcloud::StackedCloud;
use crate::spatial::KdTree3;
use crate::tensor::{Tape, Var};

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::tensor::{ParamStore, Tensor};

/// Lazily binds named parameters from a store as tape leaves, remembering
/// the mapping so gradients can be read back by name.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let tensor = self
            .store
            .get(name)
            .ok_or_else(|| Error::data(format!("parameter {name} missing from store")))?
            .clone();
        let v = self.tape.leaf(tensor);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Pre-bind a parameter name to an existing tape variable, overriding the
    /// store value (used by gradient checks to probe specific parameters).
    pub fn bind(&self, name: &str, var: Var<'t>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    /// Gradients of all bound parameters, keyed by name. Parameters the loss
    /// does not reach are omitted.
    pub fn grads_by_name(&self, grads: &crate::tensor::Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}

/// Which axis a plane projection drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneAxis {
    /// Project along z onto the x-y plane.
    DropZ,
    /// Project along y onto the x-z plane.
    DropY,
    /// Project along x onto the y-z plane.
    DropX,
}

impl PlaneAxis {
    /// The plane cycle order used by the mixing rounds.
    pub const CYCLE: [PlaneAxis; 3] = [PlaneAxis::DropZ, PlaneAxis::DropY, PlaneAxis::DropX];

    fn in_plane(&self, p: [f64; 3]) -> (f64, f64) {
        match self {
            PlaneAxis::DropZ => (p[0], p[1]),
            PlaneAxis::DropY => (p[0], p[2]),
            PlaneAxis::DropX => (p[1], p[2]),
        }
    }
}

/// A concrete 2D grid over one plane: resolution, origin and extent.
#[derive(Debug, Clone)]
pub struct PlaneSpec {
    pub axis: PlaneAxis,
    pub rho: f64,
    pub h: usize,
    pub w: usize,
    min_a: f64,
    min_b: f64,
}

impl PlaneSpec {
    /// Fit a grid to the bounds of `points` (optionally widened by extra
    /// coordinate sets), clamping each dimension to `max_dim` cells. Points
    /// outside the clamped extent map to border cells.
    pub fn fit(
        axis: PlaneAxis,
        rho: f64,
        max_dim: usize,
        points: &[[f64; 3]],
        extra: &[&[[f64; 3]]],
    ) -> Result<PlaneSpec> {
        if rho <= 0.0 {
            return Err(Error::config(format!(
                "grid resolution must be positive, got {rho}"
            )));
        }
        if max_dim == 0 {
            return Err(Error::config("grid max_dim must be at least 1".to_string()));
        }
        let mut min_a = f64::INFINITY;
        let mut min_b = f64::INFINITY;
        let mut max_a = f64::NEG_INFINITY;
        let mut max_b = f64::NEG_INFINITY;
        let mut any = false;
        for set in std::iter::once(&points).chain(extra.iter()) {
            for &p in set.iter() {
                let (a, b) = axis.in_plane(p);
                min_a = min_a.min(a);
                min_b = min_b.min(b);
                max_a = max_a.max(a);
                max_b = max_b.max(b);
                any = true;
            }
        }
        if !any {
            return Err(Error::data("plane fit over an empty point set".to_string()));
        }
        // Anchor the origin on the rho lattice so translating the cloud by a
        // multiple of rho shifts the grid with it exactly.
        let min_a = (min_a / rho).floor() * rho;
        let min_b = (min_b / rho).floor() * rho;
        let h = (((max_a - min_a) / rho).floor() as usize + 1).min(max_dim);
        let w = (((max_b - min_b) / rho).floor() as usize + 1).min(max_dim);
        Ok(PlaneSpec {
            axis,
            rho,
            h,
            w,
            min_a,
            min_b,
        })
    }

    /// Grid cell of a point, clamped to the extent.
    pub fn cell(&self, p: [f64; 3]) -> (usize, usize) {
        let (a, b) = self.axis.in_plane(p);
        let ca = ((a - self.min_a) / self.rho).floor().max(0.0) as usize;
        let cb = ((b - self.min_b) / self.rho).floor().max(0.0) as usize;
        (ca.min(self.h - 1), cb.min(self.w - 1))
    }

    pub fn cells(&self, points: &[[f64; 3]]) -> Vec<(usize, usize)> {
        points.iter().map(|&p| self.cell(p)).collect()
    }
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub knn_k: usize,
    pub rho: f64,
    pub max_grid: usize,
}

/// Per-neighbor input channels: relative offset, intensity, range.
pub const EMBED_CHANNELS: usize = 5;

/// Create every backbone parameter in the store (idempotent).
pub fn ensure_params(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
    store.get_or_init("backbone.embed.w1", &[EMBED_CHANNELS, cfg.d])?;
    store.get_or_zeros("backbone.embed.b1", &[cfg.d])?;
    store.get_or_init("backbone.embed.w2", &[cfg.d, cfg.d])?;
    store.get_or_zeros("backbone.embed.b2", &[cfg.d])?;
    for l in 0..cfg.layers {
        store.get_or_init(&format!("backbone.mix{l}.w"), &[3, 3, cfg.d, cfg.d])?;
        store.get_or_zeros(&format!("backbone.mix{l}.b"), &[cfg.d])?;
    }
    Ok(())
}

/// KNN + shared two-layer MLP + max-pool local embedding.
///
/// For each point, the `k` nearest neighbors (self included) contribute a
/// five-channel row (offset to the point, intensity, range); the shared MLP
/// lifts rows to `d` channels and a per-point max over neighbors pools them.
pub fn local_embed<'t>(
    binder: &Binder<'t, '_>,
    cloud: &StackedCloud,
    cfg: &BackboneConfig,
) -> Result<Var<'t>> {
    if cfg.knn_k < 1 {
        return Err(Error::config(
            "local_embed: k must be at least 1".to_string(),
        ));
    }
    let n = cloud.len();
    if n < cfg.knn_k {
        return Err(Error::data(format!(
            "local_embed: {n} points but k = {}",
            cfg.knn_k
        )));
    }
    let coords: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.coords()).collect();
    let tree = KdTree3::build(&coords);
    let mut rows = vec![0.0; n * cfg.knn_k * EMBED_CHANNELS];
    for (i, p) in cloud.points.iter().enumerate() {
        let neighbors = tree.knn(p.coords(), cfg.knn_k);
        for (slot, &j) in neighbors.iter().enumerate() {
            let q = &cloud.points[j];
            let o = (i * cfg.knn_k + slot) * EMBED_CHANNELS;
            rows[o] = q.x - p.x;
            rows[o + 1] = q.y - p.y;
            rows[o + 2] = q.z - p.z;
            rows[o + 3] = q.intensity;
            rows[o + 4] = q.range;
        }
    }
    let tape = binder.tape();
    let x = tape.leaf(Tensor::new(vec![n * cfg.knn_k, EMBED_CHANNELS], rows)?);
    let h = x
        .linear(
            &binder.var("backbone.embed.w1")?,
            &binder.var("backbone.embed.b1")?,
        )?
        .tanh()?
        .linear(
            &binder.var("backbone.embed.w2")?,
            &binder.var("backbone.embed.b2")?,
        )?;
    h.max_over_groups(cfg.knn_k)
}

/// One mixing round: scatter-mean onto the plane grid, one 3x3 convolution
/// with a pointwise nonlinearity, gather back, residual add.
pub fn plane_mix<'t>(
    binder: &Binder<'t, '_>,
    features: Var<'t>,
    coords: &[[f64; 3]],
    spec: &PlaneSpec,
    layer: usize,
) -> Result<Var<'t>> {
    let cells = spec.cells(coords);
    let grid = features.scatter_mean_grid(&cells, spec.h, spec.w)?;
    let mixed = grid
        .conv2d(
            &binder.var(&format!("backbone.mix{layer}.w"))?,
            &binder.var(&format!("backbone.mix{layer}.b"))?,
        )?
        .tanh()?;
    let gathered = mixed.gather_grid(&cells)?;
    features.add(&gathered)
}

/// Full backbone: local embedding then `layers` plane-mix rounds cycling
/// x-y, x-z, y-z.
pub fn backbone_forward<'t>(
    binder: &Binder<'t, '_>,
    cloud: &StackedCloud,
    cfg: &BackboneConfig,
) -> Result<Var<'t>> {
    let coords: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.coords()).collect();
    let mut features = local_embed(binder, cloud, cfg)?;
    for layer in 0..cfg.layers {
        let axis = PlaneAxis::CYCLE[layer % 3];
        let spec = PlaneSpec::fit(axis, cfg.rho, cfg.max_grid, &coords, &[])?;
        features = plane_mix(binder, features, &coords, &spec, layer)?;
    }
    Ok(features)
}

//! Multi-view temporal fusion: enrich current point features with the
//! previous frame's features via sequential per-plane 2D fusion.
//!
//! Each plane block scatters both feature streams onto the same 2D grid,
//! concatenates channels, fuses with a 1x1 convolution and gathers back to
//! the current points, replacing their features. The previous frame's
//! features enter as plain values (no backpropagation through time); on the
//! first frame the history grid is all zeros, which is the same code path.

use crate::backbone::{Binder, PlaneAxis, PlaneSpec};
use crate::error::{Error, Result};
use crate::pointcloud::{transform_points, Point5, Pose};
use crate::tensor::{Tensor, Var};

/// Previous-frame features and the coordinates they live at (in their own
/// frame). Absent state degrades MTF to the zero-history path.
#[derive(Debug, Clone)]
pub struct TemporalFeatureState {
    pub coords: Vec<[f64; 3]>,
    pub features: Tensor,
}

impl TemporalFeatureState {
    pub fn new(coords: Vec<[f64; 3]>, features: Tensor) -> Result<Self> {
        if features.dims().len() != 2 || features.dims()[0] != coords.len() {
            return Err(Error::shape(format!(
                "temporal state: {} coords vs features {:?}",
                coords.len(),
                features.dims()
            )));
        }
        Ok(TemporalFeatureState { coords, features })
    }
}

/// MTF hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct MtfConfig {
    pub d: usize,
    pub rho: f64,
    pub max_grid: usize,
}

/// Fusion kernels start as the identity on the current stream with a zeroed
/// history block, so an untrained MTF passes the backbone features through
/// (up to in-cell averaging) instead of scrambling them.
pub fn ensure_params(store: &mut crate::tensor::ParamStore, cfg: &MtfConfig) -> Result<()> {
    let d = cfg.d;
    for plane in ["xy", "xz", "yz"] {
        let name = format!("mtf.{plane}.w");
        if store.get(&name).is_none() {
            let mut kernel = vec![0.0; 2 * d * d];
            for c in 0..d {
                kernel[(d + c) * d + c] = 1.0; // current-stream block
            }
            store.set(&name, Tensor::new(vec![1, 1, 2 * d, d], kernel)?);
        }
        store.get_or_zeros(&format!("mtf.{plane}.b"), &[d])?;
    }
    Ok(())
}

fn plane_name(axis: PlaneAxis) -> &'static str {
    match axis {
        PlaneAxis::DropZ => "xy",
        PlaneAxis::DropY => "xz",
        PlaneAxis::DropX => "yz",
    }
}

/// One 2D fusion block: scatter history and current features to the plane,
/// concatenate channels (history first), 1x1-convolve down to `d` channels,
/// gather at the current points.
pub fn fuse2d<'t>(
    binder: &Binder<'t, '_>,
    history: Option<(&[[f64; 3]], Var<'t>)>,
    current: Var<'t>,
    current_coords: &[[f64; 3]],
    axis: PlaneAxis,
    cfg: &MtfConfig,
) -> Result<Var<'t>> {
    let d = cfg.d;
    if current.dims() != vec![current_coords.len(), d] {
        return Err(Error::shape(format!(
            "fuse2d: features {:?} vs {} coords (d = {d})",
            current.dims(),
            current_coords.len()
        )));
    }
    let hist_coords: &[[f64; 3]] = history.map(|(c, _)| c).unwrap_or(&[]);
    let spec = PlaneSpec::fit(axis, cfg.rho, cfg.max_grid, current_coords, &[hist_coords])?;
    let current_cells = spec.cells(current_coords);
    let current_grid = current.scatter_mean_grid(&current_cells, spec.h, spec.w)?;
    let history_grid = match history {
        Some((coords, feats)) if !coords.is_empty() => {
            feats.scatter_mean_grid(&spec.cells(coords), spec.h, spec.w)?
        }
        _ => binder.tape().leaf(Tensor::zeros(vec![spec.h, spec.w, d])),
    };
    let name = plane_name(axis);
    let fused = history_grid.concat_channels(&current_grid)?.conv2d(
        &binder.var(&format!("mtf.{name}.w"))?,
        &binder.var(&format!("mtf.{name}.b"))?,
    )?;
    fused.gather_grid(&current_cells)
}

/// Full MTF pass: transform the stored history into the current frame with
/// `pose_prev_to_now`, then run the x-y, x-z and y-z fusion blocks in order,
/// each consuming the previous block's output. The history stream is reused
/// unmodified by every block.
pub fn mtf_forward<'t>(
    binder: &Binder<'t, '_>,
    features: Var<'t>,
    coords: &[[f64; 3]],
    state: Option<&TemporalFeatureState>,
    pose_prev_to_now: &Pose,
    cfg: &MtfConfig,
) -> Result<Var<'t>> {
    let history = match state {
        Some(s) => {
            let pts: Vec<Point5> = s
                .coords
                .iter()
                .map(|&[x, y, z]| Point5::new(x, y, z, 0.0))
                .collect();
            let moved = transform_points(&pts, pose_prev_to_now)?;
            let coords: Vec<[f64; 3]> = moved.iter().map(|p| p.coords()).collect();
            Some((coords, binder.tape().leaf(s.features.clone())))
        }
        None => None,
    };
    let mut out = features;
    for axis in PlaneAxis::CYCLE {
        let hist = history.as_ref().map(|(c, v)| (c.as_slice(), *v));
        out = fuse2d(binder, hist, out, coords, axis, cfg)?;
    }
    Ok(out)
}

//! Anchor scaffold: sparse voxel anchors that spawn `k` neural Gaussians each.
//!
//! Every anchor stores a position `x_v`, `k` offsets `O_i`, a log-space
//! scaling `log l_v`, a context feature `f_v` and the two dynamics scalars
//! `d_G`, `d_L`. Gaussian centers are `x_v + O_i ⊙ l_v`; the remaining
//! attributes come from the attribute decoders.

mod decoders;
pub mod ply;

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{join, Bindings, Module};
use crate::render::{Camera, GaussianVars, RenderError};

pub use decoders::{derive_attributes, view_features_op, AttributeDecoders, DecoderVars, DerivedAttributes};

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("cannot build anchors from an empty point set")]
    EmptyPoints,
    #[error("invalid scaffold setting: {0}")]
    InvalidConfig(&'static str),
    #[error("ply: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

pub type Cell = [i64; 3];

pub fn voxel_cell(p: [f64; 3], voxel_size: f64) -> Cell {
    [
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    ]
}

pub fn cell_center(c: Cell, voxel_size: f64) -> [f64; 3] {
    [
        (c[0] as f64 + 0.5) * voxel_size,
        (c[1] as f64 + 0.5) * voxel_size,
        (c[2] as f64 + 0.5) * voxel_size,
    ]
}

/// One anchor, detached from the set.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: [f64; 3],
    /// `k` rows.
    pub offsets: Vec<[f64; 3]>,
    /// `l_v`, positive.
    pub scaling: [f64; 3],
    pub feature: Vec<f64>,
    pub d_global: f64,
    pub d_local: f64,
}

/// `μ_i = x_v + O_i ⊙ l_v`.
pub fn derive_positions(anchor: &Anchor) -> Vec<[f64; 3]> {
    anchor
        .offsets
        .iter()
        .map(|o| {
            [
                anchor.position[0] + o[0] * anchor.scaling[0],
                anchor.position[1] + o[1] * anchor.scaling[1],
                anchor.position[2] + o[2] * anchor.scaling[2],
            ]
        })
        .collect()
}

/// Anchors stored column-wise as learnable row tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub voxel_size: f64,
    pub k: usize,
    pub feat_dim: usize,
    /// `[N, 3]`
    pub positions: Tensor,
    /// `[N, 3k]`
    pub offsets: Tensor,
    /// `[N, 3]`, `log l_v`.
    pub scaling: Tensor,
    /// `[N, F]`
    pub features: Tensor,
    /// `[N, 1]`
    pub d_global: Tensor,
    /// `[N, 1]`
    pub d_local: Tensor,
    pub stats: AnchorStats,
}

/// Running statistics used by growing and pruning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorStats {
    /// Per neural Gaussian (`N·k`).
    pub grad_sum: Vec<f64>,
    pub grad_count: Vec<u32>,
    /// Per anchor.
    pub opacity_sum: Vec<f64>,
    pub opacity_count: Vec<u32>,
}

impl AnchorStats {
    fn new(n: usize, k: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n * k],
            grad_count: vec![0; n * k],
            opacity_sum: vec![0.0; n],
            opacity_count: vec![0; n],
        }
    }
}

/// Removal report of [`AnchorSet::prune_anchors`].
#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub removed: usize,
    /// Per pre-prune anchor: whether it survived.
    pub keep: Vec<bool>,
}

/// One anchor at the center of each occupied voxel.
pub fn init_from_points<R: Rng>(
    points: &[[f64; 3]],
    voxel_size: f64,
    k: usize,
    feat_dim: usize,
    rng: &mut R,
) -> Result<AnchorSet, ScaffoldError> {
    if points.is_empty() {
        return Err(ScaffoldError::EmptyPoints);
    }
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(ScaffoldError::InvalidConfig("voxel_size must be positive"));
    }
    if k == 0 {
        return Err(ScaffoldError::InvalidConfig("n_offset must be at least 1"));
    }
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for &p in points {
        let c = voxel_cell(p, voxel_size);
        if seen.insert(c) {
            cells.push(c);
        }
    }
    let n = cells.len();
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let positions: Vec<f64> = cells.iter().flat_map(|&c| cell_center(c, voxel_size)).collect();
    let features = (0..n * feat_dim).map(|_| normal.sample(rng)).collect();
    Ok(AnchorSet {
        voxel_size,
        k,
        feat_dim,
        positions: Tensor::new(&[n, 3], positions)?.into_param(),
        offsets: Tensor::zeros(&[n, 3 * k]).into_param(),
        scaling: Tensor::filled(&[n, 3], voxel_size.ln()).into_param(),
        features: Tensor::new(&[n, feat_dim], features)?.into_param(),
        d_global: Tensor::zeros(&[n, 1]).into_param(),
        d_local: Tensor::zeros(&[n, 1]).into_param(),
        stats: AnchorStats::new(n, k),
    })
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn anchor(&self, i: usize) -> Anchor {
        let s = self.scaling.row(i);
        Anchor {
            position: self.position(i),
            offsets: self.offsets.row(i).chunks(3).map(|o| [o[0], o[1], o[2]]).collect(),
            scaling: [s[0].exp(), s[1].exp(), s[2].exp()],
            feature: self.features.row(i).to_vec(),
            d_global: self.d_global.values()[i],
            d_local: self.d_local.values()[i],
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        (0..self.len()).map(|i| voxel_cell(self.position(i), self.voxel_size)).collect()
    }

    /// True when no voxel holds more than one anchor.
    pub fn cells_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.cells().into_iter().all(|c| seen.insert(c))
    }

    /// All neural Gaussian centers, `N·k` rows.
    pub fn neural_centers(&self) -> Vec<[f64; 3]> {
        (0..self.len()).flat_map(|i| derive_positions(&self.anchor(i))).collect()
    }

    /// Keeps every anchor inside the voxel it was assigned to, so position
    /// updates cannot break the one-anchor-per-voxel rule.
    pub fn clamp_to_cells(&mut self, home: &[Cell]) {
        let v = self.voxel_size;
        for (i, c) in home.iter().enumerate() {
            let row = self.positions.row_mut(i);
            for a in 0..3 {
                let lo = c[a] as f64 * v;
                let hi = (c[a] + 1) as f64 * v;
                let inset = v * 1e-6;
                row[a] = row[a].clamp(lo + inset, hi - inset);
            }
        }
    }

    pub fn reset_stats(&mut self) {
        self.stats = AnchorStats::new(self.len(), self.k);
    }

    /// Adds per-Gaussian screen-space gradient norms for visible Gaussians.
    pub fn accumulate_growth(&mut self, grad_norms: &[f64], visible: &[bool]) {
        for (i, (&g, &v)) in grad_norms.iter().zip(visible).enumerate() {
            if v {
                self.stats.grad_sum[i] += g;
                self.stats.grad_count[i] += 1;
            }
        }
    }

    /// Adds the mean derived opacity of each anchor (`opacity` has `N·k` values).
    pub fn accumulate_opacity(&mut self, opacity: &[f64]) {
        for (i, chunk) in opacity.chunks(self.k).enumerate() {
            self.stats.opacity_sum[i] += chunk.iter().sum::<f64>() / self.k as f64;
            self.stats.opacity_count[i] += 1;
        }
    }

    /// New anchors in empty voxels under high-gradient neural Gaussians.
    /// Returns the number added; new anchors are appended at the end.
    pub fn grow_anchors(&mut self, threshold_grad: f64) -> usize {
        let mut occupied: HashSet<Cell> = self.cells().into_iter().collect();
        let centers = self.neural_centers();
        let mut new_rows = Vec::new();
        for (g, center) in centers.iter().enumerate() {
            let count = self.stats.grad_count[g];
            if count == 0 || self.stats.grad_sum[g] / count as f64 <= threshold_grad {
                continue;
            }
            let cell = voxel_cell(*center, self.voxel_size);
            if occupied.insert(cell) {
                new_rows.push((g / self.k, cell));
            }
        }
        for &(parent, cell) in &new_rows {
            let pos = cell_center(cell, self.voxel_size);
            let scaling = self.scaling.row(parent).to_vec();
            let feature = self.features.row(parent).to_vec();
            self.positions.push_row(&pos).expect("row width");
            self.offsets.push_row(&vec![0.0; 3 * self.k]).expect("row width");
            self.scaling.push_row(&scaling).expect("row width");
            self.features.push_row(&feature).expect("row width");
            self.d_global.push_row(&[0.0]).expect("row width");
            self.d_local.push_row(&[0.0]).expect("row width");
        }
        self.reset_stats();
        new_rows.len()
    }

    /// Drops anchors whose mean derived opacity is below the threshold.
    /// Anchors without statistics are kept. If every anchor would go, the
    /// most opaque one survives.
    pub fn prune_anchors(&mut self, threshold_opacity: f64) -> PruneReport {
        let n = self.len();
        let mean = |i: usize| -> Option<f64> {
            let c = self.stats.opacity_count[i];
            (c > 0).then(|| self.stats.opacity_sum[i] / c as f64)
        };
        let mut keep: Vec<bool> = (0..n).map(|i| mean(i).is_none_or(|m| m >= threshold_opacity)).collect();
        if n > 0 && keep.iter().all(|&k| !k) {
            let best = (0..n)
                .max_by(|&a, &b| mean(a).unwrap_or(0.0).total_cmp(&mean(b).unwrap_or(0.0)))
                .expect("non-empty");
            log::warn!("pruning would remove every anchor; keeping anchor {best}");
            keep[best] = true;
        }
        let removed = keep.iter().filter(|&&k| !k).count();
        if removed > 0 {
            self.retain(&keep);
        }
        self.reset_stats();
        PruneReport { removed, keep }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.positions.retain_rows(keep);
        self.offsets.retain_rows(keep);
        self.scaling.retain_rows(keep);
        self.features.retain_rows(keep);
        self.d_global.retain_rows(keep);
        self.d_local.retain_rows(keep);
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> AnchorVars {
        AnchorVars {
            positions: b.param(tape, join(prefix, "positions"), &self.positions),
            offsets: b.param(tape, join(prefix, "offsets"), &self.offsets),
            scaling: b.param(tape, join(prefix, "scaling"), &self.scaling),
            features: b.param(tape, join(prefix, "features"), &self.features),
            d_global: b.param(tape, join(prefix, "d_global"), &self.d_global),
            d_local: b.param(tape, join(prefix, "d_local"), &self.d_local),
        }
    }
}

impl Module for AnchorSet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "positions"), &self.positions);
        f(&join(prefix, "offsets"), &self.offsets);
        f(&join(prefix, "scaling"), &self.scaling);
        f(&join(prefix, "features"), &self.features);
        f(&join(prefix, "d_global"), &self.d_global);
        f(&join(prefix, "d_local"), &self.d_local);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "positions"), &mut self.positions);
        f(&join(prefix, "offsets"), &mut self.offsets);
        f(&join(prefix, "scaling"), &mut self.scaling);
        f(&join(prefix, "features"), &mut self.features);
        f(&join(prefix, "d_global"), &mut self.d_global);
        f(&join(prefix, "d_local"), &mut self.d_local);
    }
}

/// Anchor tensors on a tape. Deformation produces new instances of this.
#[derive(Clone, Copy, Debug)]
pub struct AnchorVars {
    pub positions: Var,
    pub offsets: Var,
    pub scaling: Var,
    pub features: Var,
    pub d_global: Var,
    pub d_local: Var,
}

/// Neural Gaussians before activation of the scale: `[M, ·]` rows.
#[derive(Clone, Copy, Debug)]
pub struct NeuralGaussians {
    pub centers: Var,
    /// Raw, normalized inside the projection.
    pub quats: Var,
    pub log_scales: Var,
    pub opacity: Var,
    pub colors: Var,
}

impl NeuralGaussians {
    pub fn to_render(&self, tape: &mut Tape) -> GaussianVars {
        GaussianVars {
            centers: self.centers,
            quats: self.quats,
            scales: tape.exp(self.log_scales),
            opacity: self.opacity,
            colors: self.colors,
        }
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.centers)[0]
    }
}

/// Spawns the `k` neural Gaussians of every anchor on the tape.
pub fn derive_gaussians(
    tape: &mut Tape,
    anchors: &AnchorVars,
    k: usize,
    decoders: &DecoderVars,
    camera: &Camera,
) -> Result<NeuralGaussians, ScaffoldError> {
    let n = tape.shape(anchors.positions)[0];
    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let pos = tape.gather_rows(anchors.positions, &repeat)?;
    let lv = tape.exp(anchors.scaling);
    let lv = tape.gather_rows(lv, &repeat)?;
    let off = tape.reshape(anchors.offsets, &[n * k, 3])?;
    let scaled = tape.mul(off, lv)?;
    let centers = tape.add(pos, scaled)?;

    let view = view_features_op(tape, anchors.positions, camera.position())?;
    let input = tape.concat_cols(&[anchors.features, view])?;
    let attrs = decoders.forward(tape, input, k)?;
    let log_sv = tape.gather_rows(anchors.scaling, &repeat)?;
    let log_scales = tape.add(attrs.raw_log_scales, log_sv)?;
    Ok(NeuralGaussians {
        centers,
        quats: attrs.quats,
        log_scales,
        opacity: attrs.opacity,
        colors: attrs.colors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn one_voxel_one_anchor() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [0.01 * i as f64, 0.02, 0.03]).collect();
        let set = init_from_points(&pts, 0.5, 10, 32, &mut rng()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.position(0), [0.25, 0.25, 0.25]);
        assert!(set.offsets.values().iter().all(|&v| v == 0.0));
        assert!(set.d_global.values().iter().chain(set.d_local.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn two_corners_two_anchors() {
        let set = init_from_points(&[[0.0; 3], [1.0; 3]], 0.5, 10, 32, &mut rng()).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn empty_points_rejected() {
        assert!(matches!(
            init_from_points(&[], 0.1, 10, 8, &mut rng()),
            Err(ScaffoldError::EmptyPoints)
        ));
    }

    #[test]
    fn hand_evaluated_center() {
        let a = Anchor {
            position: [1.0, 2.0, 3.0],
            offsets: vec![[0.1, 0.0, 0.0], [0.0; 3]],
            scaling: [2.0; 3],
            feature: vec![],
            d_global: 0.0,
            d_local: 0.0,
        };
        let mu = derive_positions(&a);
        assert!((mu[0][0] - 1.2).abs() < 1e-15);
        assert_eq!(&mu[0][1..], &[2.0, 3.0]);
        assert_eq!(mu[1], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn row_count_is_k() {
        for k in [1, 10, 20] {
            let set = init_from_points(&[[0.3, 0.1, -0.2]], 0.1, k, 4, &mut rng()).unwrap();
            assert_eq!(derive_positions(&set.anchor(0)).len(), k);
        }
    }

    fn with_stats(set: &mut AnchorSet, g: usize, grad: f64) {
        let mut norms = vec![0.0; set.len() * set.k];
        norms[g] = grad;
        set.accumulate_growth(&norms, &vec![true; norms.len()]);
    }

    #[test]
    fn low_gradients_grow_nothing() {
        let mut set = init_from_points(&[[0.05; 3]], 0.1, 2, 4, &mut rng()).unwrap();
        with_stats(&mut set, 0, 1e-5);
        assert_eq!(set.grow_anchors(2e-4), 0);
    }

    #[test]
    fn one_hot_gaussian_in_empty_voxel_grows_one() {
        let mut set = init_from_points(&[[0.05; 3]], 0.1, 2, 4, &mut rng()).unwrap();
        // Push the second Gaussian into the neighbouring voxel along x.
        set.offsets.row_mut(0)[3] = 0.08 / 0.1;
        with_stats(&mut set, 1, 1.0);
        // The first Gaussian sits in the occupied voxel and must not grow.
        set.stats.grad_sum[0] = 1.0;
        set.stats.grad_count[0] = 1;
        assert_eq!(set.grow_anchors(2e-4), 1);
        assert_eq!(set.len(), 2);
        assert!((set.position(1)[0] - 0.15).abs() < 1e-12);
        assert_eq!(set.features.row(1), set.features.row(0));
        assert!(set.offsets.row(1).iter().all(|&v| v == 0.0));
        assert!(set.cells_unique());
        assert_eq!(set.stats.grad_sum.len(), 4);
    }

    #[test]
    fn prune_low_opacity() {
        let mut set = init_from_points(&[[0.05; 3], [0.55; 3]], 0.1, 2, 4, &mut rng()).unwrap();
        set.accumulate_opacity(&[0.001, 0.001, 0.9, 0.8]);
        let r = set.prune_anchors(0.005);
        assert_eq!(r.removed, 1);
        assert_eq!(r.keep, vec![false, true]);
        assert_eq!(set.len(), 1);
        assert!((set.position(0)[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn prune_high_opacity_keeps_all() {
        let mut set = init_from_points(&[[0.05; 3], [0.55; 3]], 0.1, 1, 4, &mut rng()).unwrap();
        set.accumulate_opacity(&[0.5, 0.7]);
        assert_eq!(set.prune_anchors(0.005).removed, 0);
    }

    #[test]
    fn prune_everything_keeps_best() {
        let mut set = init_from_points(&[[0.05; 3], [0.55; 3]], 0.1, 1, 4, &mut rng()).unwrap();
        set.accumulate_opacity(&[0.001, 0.003]);
        let r = set.prune_anchors(0.005);
        assert_eq!(r.removed, 1);
        assert_eq!(r.keep, vec![false, true]);
    }

    #[test]
    fn clamp_keeps_home_cell() {
        let mut set = init_from_points(&[[0.05; 3]], 0.1, 1, 2, &mut rng()).unwrap();
        let home = set.cells();
        set.positions.values_mut()[0] = 0.31;
        set.clamp_to_cells(&home);
        assert_eq!(set.cells(), home);
    }
}

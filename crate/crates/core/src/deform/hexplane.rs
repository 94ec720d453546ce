use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use super::DeformError;
use crate::autodiff::{AutodiffError, BackwardCtx, Tape, Tensor, Var};
use crate::nn::{join, Bindings, Module};

/// Axis pairs of the six planes: xy, xz, yz, xt, yt, zt (t is axis 3).
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

static OUT_OF_BOUNDS_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, PartialEq)]
pub struct HexPlaneConfig {
    /// Base `(Rx, Ry, Rz, Rt)`; every entry at least 2.
    pub resolution: [usize; 4],
    pub scales: usize,
    /// Spatial resolution factor between consecutive scales.
    pub multiplier: usize,
    pub channels: usize,
    /// Spatial box `[min, max]` mapped to `[0, 1]³`.
    pub bounds: [[f64; 3]; 2],
}

impl HexPlaneConfig {
    pub fn validate(&self) -> Result<(), DeformError> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(DeformError::InvalidConfig("hexplane resolution must be at least 2"));
        }
        if self.scales == 0 || self.multiplier == 0 || self.channels == 0 {
            return Err(DeformError::InvalidConfig("hexplane scales, multiplier and channels must be positive"));
        }
        if (0..3).any(|a| !(self.bounds[1][a] > self.bounds[0][a])) {
            return Err(DeformError::InvalidConfig("hexplane bounds must have positive extent"));
        }
        Ok(())
    }

    /// Grid resolution of all four axes at scale `s`.
    pub fn resolution_at(&self, s: usize) -> [usize; 4] {
        let m = self.multiplier.pow(s as u32);
        let r = self.resolution;
        [r[0] * m, r[1] * m, r[2] * m, r[3]]
    }

    pub fn output_dim(&self) -> usize {
        self.channels * self.scales
    }
}

/// Multi-scale six-plane factorization of a 4D feature field.
#[derive(Clone, Debug, PartialEq)]
pub struct HexPlane {
    pub config: HexPlaneConfig,
    /// `scales × 6` planes, each `[Ra, Rb, C]`.
    pub planes: Vec<Tensor>,
}

impl HexPlane {
    /// Spatial planes uniform in `[0.1, 0.5]`, time planes at 1.
    pub fn new<R: Rng>(config: HexPlaneConfig, rng: &mut R) -> Result<Self, DeformError> {
        config.validate()?;
        let mut planes = Vec::with_capacity(config.scales * 6);
        for s in 0..config.scales {
            let res = config.resolution_at(s);
            for &(a, b) in &PLANE_AXES {
                let shape = [res[a], res[b], config.channels];
                let t = if b == 3 {
                    Tensor::filled(&shape, 1.0)
                } else {
                    let n = shape.iter().product();
                    Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.1..0.5)).collect())?
                };
                planes.push(t.into_param());
            }
        }
        Ok(Self { config, planes })
    }

    pub fn plane(&self, scale: usize, p: usize) -> &Tensor {
        &self.planes[scale * 6 + p]
    }

    pub fn plane_mut(&mut self, scale: usize, p: usize) -> &mut Tensor {
        &mut self.planes[scale * 6 + p]
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> HexPlaneVars {
        let planes = self
            .planes
            .iter()
            .enumerate()
            .map(|(i, t)| b.param(tape, join(prefix, &plane_name(i)), t))
            .collect();
        HexPlaneVars {
            config: self.config.clone(),
            planes,
        }
    }

    /// Plain query of one point.
    pub fn query(&self, x: [f64; 3], t: f64) -> Vec<f64> {
        let values: Vec<&[f64]> = self.planes.iter().map(Tensor::values).collect();
        let mut out = vec![0.0; self.config.output_dim()];
        let coords = Coords::new(&self.config, x, t);
        eval_point(&self.config, &values, &coords, &mut out);
        out
    }
}

fn plane_name(i: usize) -> String {
    format!("s{}/{}", i / 6, PLANE_NAMES[i % 6])
}

impl Module for HexPlane {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.planes.iter().enumerate() {
            f(&join(prefix, &plane_name(i)), t);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.planes.iter_mut().enumerate() {
            f(&join(prefix, &plane_name(i)), t);
        }
    }
}

#[derive(Clone, Debug)]
pub struct HexPlaneVars {
    pub config: HexPlaneConfig,
    pub planes: Vec<Var>,
}

/// Normalized coordinates of one query in `[0, 1]⁴` plus the factor
/// `d u / d x` per spatial axis (zero where clamped).
struct Coords {
    u: [f64; 4],
    du: [f64; 3],
}

impl Coords {
    fn new(cfg: &HexPlaneConfig, x: [f64; 3], t: f64) -> Self {
        let mut u = [0.0; 4];
        let mut du = [0.0; 3];
        let mut clamped = false;
        for a in 0..3 {
            let lo = cfg.bounds[0][a];
            let ext = cfg.bounds[1][a] - lo;
            let v = (x[a] - lo) / ext;
            if (0.0..=1.0).contains(&v) {
                u[a] = v;
                du[a] = 1.0 / ext;
            } else {
                clamped = true;
                u[a] = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
            }
        }
        if !(0.0..=1.0).contains(&t) {
            clamped = true;
        }
        u[3] = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        if clamped && !OUT_OF_BOUNDS_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("hexplane query outside its bounds; clamping to the boundary cell");
        }
        Self { u, du }
    }
}

/// Lower grid index and fractional weight along one axis.
fn cell(u: f64, r: usize) -> (usize, f64) {
    let g = u * (r - 1) as f64;
    let i = (g.floor() as usize).min(r - 2);
    (i, g - i as f64)
}

struct PlaneSample {
    /// Offsets (in feature rows) of corners 00, 01, 10, 11.
    idx: [usize; 4],
    wa: f64,
    wb: f64,
    ra: usize,
    rb: usize,
}

fn sample(cfg_res: [usize; 4], coords: &Coords, a: usize, b: usize) -> PlaneSample {
    let (ra, rb) = (cfg_res[a], cfg_res[b]);
    let (ia, wa) = cell(coords.u[a], ra);
    let (ib, wb) = cell(coords.u[b], rb);
    let base = ia * rb + ib;
    PlaneSample {
        idx: [base, base + 1, base + rb, base + rb + 1],
        wa,
        wb,
        ra,
        rb,
    }
}

fn bilinear(values: &[f64], s: &PlaneSample, c: usize, channels: usize, out: &mut [f64]) {
    let w = [
        (1.0 - s.wa) * (1.0 - s.wb),
        (1.0 - s.wa) * s.wb,
        s.wa * (1.0 - s.wb),
        s.wa * s.wb,
    ];
    for ch in 0..c {
        out[ch] = (0..4).map(|k| w[k] * values[s.idx[k] * channels + ch]).sum();
    }
}

fn eval_point(cfg: &HexPlaneConfig, planes: &[&[f64]], coords: &Coords, out: &mut [f64]) {
    let c = cfg.channels;
    let mut f = vec![0.0; c];
    for s in 0..cfg.scales {
        let res = cfg.resolution_at(s);
        let acc = &mut out[s * c..(s + 1) * c];
        acc.fill(1.0);
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let smp = sample(res, coords, a, b);
            bilinear(planes[s * 6 + p], &smp, c, c, &mut f);
            for ch in 0..c {
                acc[ch] *= f[ch];
            }
        }
    }
}

/// Queries every row of `points` (`[M, 3]`) at `times` (one per point or a
/// single shared value). Output `[M, C·scales]`; gradients reach the plane
/// entries and the spatial coordinates.
pub fn query_op(
    tape: &mut Tape,
    planes: &HexPlaneVars,
    points: Var,
    times: &[f64],
) -> Result<Var, AutodiffError> {
    let cfg = planes.config.clone();
    let m = tape.shape(points)[0];
    assert!(times.len() == 1 || times.len() == m, "one time per point or one shared time");
    let time = |i: usize| if times.len() == 1 { times[0] } else { times[i] };
    let p = tape.value(points);
    let coords: Vec<Coords> = (0..m)
        .map(|i| Coords::new(&cfg, [p[i * 3], p[i * 3 + 1], p[i * 3 + 2]], time(i)))
        .collect();
    let dim = cfg.output_dim();
    let mut out = vec![0.0; m * dim];
    {
        let values: Vec<&[f64]> = planes.planes.iter().map(|&v| tape.value(v)).collect();
        for (i, co) in coords.iter().enumerate() {
            eval_point(&cfg, &values, co, &mut out[i * dim..(i + 1) * dim]);
        }
    }
    let mut inputs = vec![points];
    inputs.extend_from_slice(&planes.planes);
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let c = cfg.channels;
        let plane_vals = &ctx.inputs[1..];
        let mut gplanes: Vec<Vec<f64>> = plane_vals.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut gpts = vec![0.0; m * 3];
        let mut feats = vec![0.0; 6 * c];
        let mut prefix = vec![0.0; 7 * c];
        for (i, co) in coords.iter().enumerate() {
            for s in 0..cfg.scales {
                let go = &ctx.grad_output[i * dim + s * c..i * dim + (s + 1) * c];
                if go.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let res = cfg.resolution_at(s);
                let samples: Vec<PlaneSample> =
                    PLANE_AXES.iter().map(|&(a, b)| sample(res, co, a, b)).collect();
                for p in 0..6 {
                    bilinear(plane_vals[s * 6 + p], &samples[p], c, c, &mut feats[p * c..(p + 1) * c]);
                }
                // prefix[p] = ∏_{q<p} f_q
                prefix[..c].fill(1.0);
                for p in 0..6 {
                    for ch in 0..c {
                        prefix[(p + 1) * c + ch] = prefix[p * c + ch] * feats[p * c + ch];
                    }
                }
                let mut suffix = vec![1.0; c];
                for p in (0..6).rev() {
                    let smp = &samples[p];
                    let (a, b) = PLANE_AXES[p];
                    let vals = plane_vals[s * 6 + p];
                    let gp = &mut gplanes[s * 6 + p];
                    let w = [
                        (1.0 - smp.wa) * (1.0 - smp.wb),
                        (1.0 - smp.wa) * smp.wb,
                        smp.wa * (1.0 - smp.wb),
                        smp.wa * smp.wb,
                    ];
                    let (mut dga, mut dgb) = (0.0, 0.0);
                    for ch in 0..c {
                        let df = go[ch] * prefix[p * c + ch] * suffix[ch];
                        for k in 0..4 {
                            gp[smp.idx[k] * c + ch] += w[k] * df;
                        }
                        let v = |k: usize| vals[smp.idx[k] * c + ch];
                        dga += df * ((1.0 - smp.wb) * (v(2) - v(0)) + smp.wb * (v(3) - v(1)));
                        dgb += df * ((1.0 - smp.wa) * (v(1) - v(0)) + smp.wa * (v(3) - v(2)));
                    }
                    if a < 3 {
                        gpts[i * 3 + a] += dga * (smp.ra - 1) as f64 * co.du[a];
                    }
                    if b < 3 {
                        gpts[i * 3 + b] += dgb * (smp.rb - 1) as f64 * co.du[b];
                    }
                    for ch in 0..c {
                        suffix[ch] *= feats[p * c + ch];
                    }
                }
            }
        }
        let mut grads = vec![Some(gpts)];
        grads.extend(gplanes.into_iter().map(Some));
        grads
    });
    tape.custom("hexplane", &inputs, vec![m, dim], out, backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(scales: usize, channels: usize) -> HexPlaneConfig {
        HexPlaneConfig {
            resolution: [4, 5, 3, 6],
            scales,
            multiplier: 2,
            channels,
            bounds: [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        }
    }

    #[test]
    fn constant_grid_closed_form() {
        let mut h = HexPlane::new(cfg(1, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for p in h.planes.iter_mut() {
            p.values_mut().fill(2.0);
        }
        assert_eq!(h.query([0.3, -0.2, 0.9], 0.4), vec![64.0]);
    }

    #[test]
    fn node_query_is_product_of_nodes() {
        let h = HexPlane::new(cfg(1, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // x node 1 of 4, y node 2 of 5, z node 0 of 3, t node 5 of 6.
        let x = [-1.0 + 2.0 / 3.0, 0.0, -1.0];
        let t = 1.0;
        let idx = [1usize, 2, 0, 5];
        let r = [4usize, 5, 3, 6];
        let mut want = [1.0; 2];
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let v = h.plane(0, p).values();
            for ch in 0..2 {
                want[ch] *= v[(idx[a] * r[b] + idx[b]) * 2 + ch];
            }
        }
        let got = h.query(x, t);
        for ch in 0..2 {
            assert!((got[ch] - want[ch]).abs() < 1e-14);
        }
    }

    #[test]
    fn scale_resolutions() {
        let c = cfg(2, 1);
        assert_eq!(c.resolution_at(1), [8, 10, 6, 6]);
        let h = HexPlane::new(c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(h.plane(1, 0).shape(), &[8, 10, 1]);
        assert_eq!(h.plane(1, 5).shape(), &[6, 6, 1]);
        assert!(h.plane(0, 3).values().iter().all(|&v| v == 1.0));
        assert!(h.plane(0, 0).values().iter().all(|&v| (0.1..0.5).contains(&v)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = HexPlane::new(cfg(2, 2), &mut rng).unwrap();
        let pts = vec![0.31, -0.47, 0.12, -0.83, 0.66, -0.05];
        let times = [0.37, 0.71];
        let weights: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let eval = |h: &HexPlane, pts: &[f64]| -> f64 {
            (0..2)
                .map(|i| {
                    h.query([pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]], times[i])
                        .iter()
                        .zip(&weights[i * 4..])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let vars = h.bind(&mut tape, &mut b, "h");
        let p = tape.param(&Tensor::new(&[2, 3], pts.clone()).unwrap());
        let q = query_op(&mut tape, &vars, p, &times).unwrap();
        let w = tape.constant(&[2, 4], weights.clone()).unwrap();
        let prod = tape.mul(q, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let eps = 1e-6;
        let gp = tape.grad(p).unwrap();
        for k in 0..6 {
            let (mut a, mut bb) = (pts.clone(), pts.clone());
            a[k] += eps;
            bb[k] -= eps;
            let fd = (eval(&h, &a) - eval(&h, &bb)) / (2.0 * eps);
            assert!((fd - gp[k]).abs() < 1e-7, "point {k}: {fd} vs {}", gp[k]);
        }
        for (pi, &var) in vars.planes.iter().enumerate() {
            let g = tape.grad(var).unwrap();
            for e in (0..g.len()).step_by(7) {
                let mut hp = h.clone();
                hp.planes[pi].values_mut()[e] += eps;
                let mut hm = h.clone();
                hm.planes[pi].values_mut()[e] -= eps;
                let fd = (eval(&hp, &pts) - eval(&hm, &pts)) / (2.0 * eps);
                assert!((fd - g[e]).abs() < 1e-7, "plane {pi}[{e}]: {fd} vs {}", g[e]);
            }
        }
    }

    #[test]
    fn out_of_bounds_clamps() {
        let h = HexPlane::new(cfg(1, 1), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(h.query([5.0, 0.2, -9.0], 1.5), h.query([1.0, 0.2, -1.0], 1.0));
    }
}

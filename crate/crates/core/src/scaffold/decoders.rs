use rand::Rng;

use super::{Anchor, ScaffoldError};
use crate::autodiff::{AutodiffError, BackwardCtx, Tape, Tensor, Var};
use crate::nn::{join, Bindings, Mlp, MlpVars, Module};
use crate::render::Camera;

/// Initial opacity logit of every spawned Gaussian.
pub(crate) const OPACITY_BIAS_INIT: f64 = -1.0;

/// `F_alpha`, `F_color`, `F_quat_scale`: two-layer MLPs from
/// `[f_v ‖ δ_vc ‖ d_vc]` to the attributes of all `k` Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDecoders {
    pub k: usize,
    pub alpha: Mlp,
    pub color: Mlp,
    pub quat_scale: Mlp,
}

impl AttributeDecoders {
    pub fn new<R: Rng>(rng: &mut R, feat_dim: usize, k: usize, hidden: usize) -> Self {
        let input = feat_dim + 4;
        let mut alpha = Mlp::new(rng, &[input, hidden, k]);
        let color = Mlp::new(rng, &[input, hidden, 3 * k]);
        let mut quat_scale = Mlp::new(rng, &[input, hidden, 7 * k]);
        alpha.last_mut().bias.values_mut().fill(OPACITY_BIAS_INIT);
        {
            let last = quat_scale.last_mut();
            last.weight.values_mut().iter_mut().for_each(|w| *w *= 0.1);
            let b = last.bias.values_mut();
            for chunk in b.chunks_mut(7) {
                chunk.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            }
        }
        Self {
            k,
            alpha,
            color,
            quat_scale,
        }
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> DecoderVars {
        DecoderVars {
            alpha: self.alpha.bind(tape, b, &join(prefix, "alpha")),
            color: self.color.bind(tape, b, &join(prefix, "color")),
            quat_scale: self.quat_scale.bind(tape, b, &join(prefix, "quat_scale")),
        }
    }
}

impl Module for AttributeDecoders {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.alpha.visit_params(&join(prefix, "alpha"), f);
        self.color.visit_params(&join(prefix, "color"), f);
        self.quat_scale.visit_params(&join(prefix, "quat_scale"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.alpha.visit_params_mut(&join(prefix, "alpha"), f);
        self.color.visit_params_mut(&join(prefix, "color"), f);
        self.quat_scale.visit_params_mut(&join(prefix, "quat_scale"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub alpha: MlpVars,
    pub color: MlpVars,
    pub quat_scale: MlpVars,
}

/// Decoded per-Gaussian attributes, `N·k` rows each.
pub struct DecodedVars {
    pub opacity: Var,
    pub colors: Var,
    pub quats: Var,
    pub raw_log_scales: Var,
}

impl DecoderVars {
    pub fn forward(&self, tape: &mut Tape, input: Var, k: usize) -> Result<DecodedVars, AutodiffError> {
        let n = tape.shape(input)[0];
        let a = self.alpha.forward(tape, input)?;
        let a = tape.reshape(a, &[n * k, 1])?;
        let opacity = tape.sigmoid(a);
        let c = self.color.forward(tape, input)?;
        let c = tape.reshape(c, &[n * k, 3])?;
        let colors = tape.sigmoid(c);
        let qs = self.quat_scale.forward(tape, input)?;
        let qs = tape.reshape(qs, &[n * k, 7])?;
        let quats = tape.slice_cols(qs, 0, 4)?;
        let raw_log_scales = tape.slice_cols(qs, 4, 3)?;
        Ok(DecodedVars {
            opacity,
            colors,
            quats,
            raw_log_scales,
        })
    }
}

fn view_row(p: &[f64], cam: [f64; 3]) -> ([f64; 4], [[f64; 3]; 4]) {
    let d = [p[0] - cam[0], p[1] - cam[1], p[2] - cam[2]];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if dist <= f64::EPSILON {
        return ([0.0, 0.0, 0.0, 1.0], [[0.0; 3]; 4]);
    }
    let u = [d[0] / dist, d[1] / dist, d[2] / dist];
    let mut jac = [[0.0; 3]; 4];
    jac[0] = u;
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            jac[1 + i][j] = (eye - u[i] * u[j]) / dist;
        }
    }
    ([dist, u[0], u[1], u[2]], jac)
}

/// `[N, 3]` anchor positions to `[N, 4]` rows `(δ_vc, d_vc)`: camera
/// distance and unit viewing direction. A zero-length view vector yields
/// direction `(0, 0, 1)` and no gradient.
pub fn view_features_op(tape: &mut Tape, positions: Var, camera: [f64; 3]) -> Result<Var, AutodiffError> {
    let n = tape.shape(positions)[0];
    let p = tape.value(positions);
    let mut out = Vec::with_capacity(n * 4);
    let mut jacs = Vec::with_capacity(n);
    for i in 0..n {
        let (v, j) = view_row(&p[i * 3..i * 3 + 3], camera);
        out.extend_from_slice(&v);
        jacs.push(j);
    }
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let mut g = vec![0.0; n * 3];
        for (i, jac) in jacs.iter().enumerate() {
            for (o, row) in jac.iter().enumerate() {
                let go = ctx.grad_output[i * 4 + o];
                for a in 0..3 {
                    g[i * 3 + a] += go * row[a];
                }
            }
        }
        vec![Some(g)]
    });
    tape.custom("view_features", &[positions], vec![n, 4], out, backward)
}

/// Attributes of the `k` Gaussians of one anchor, fully activated.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedAttributes {
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub quaternion: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    /// The camera sat on the anchor; the fallback direction was used.
    pub degenerate_view: bool,
}

pub fn derive_attributes(
    anchor: &Anchor,
    camera: &Camera,
    decoders: &AttributeDecoders,
) -> Result<DerivedAttributes, ScaffoldError> {
    let k = decoders.k;
    let cam = camera.position();
    let (view, _) = view_row(&anchor.position, cam);
    let degenerate_view = view[0] == 0.0;
    if degenerate_view {
        log::warn!("camera coincides with an anchor; using the fallback view direction");
    }
    let mut tape = Tape::new();
    let mut input = anchor.feature.clone();
    input.extend_from_slice(&view);
    let x = tape.constant(&[1, input.len()], input)?;
    let mut b = Bindings::new();
    let vars = decoders.bind(&mut tape, &mut b, "");
    let d = vars.forward(&mut tape, x, k)?;
    let (op, col, q, s) = (
        tape.value(d.opacity),
        tape.value(d.colors),
        tape.value(d.quats),
        tape.value(d.raw_log_scales),
    );
    Ok(DerivedAttributes {
        opacity: op.to_vec(),
        color: col.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        quaternion: q
            .chunks(4)
            .map(|q| {
                let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                if n > 0.0 {
                    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
                } else {
                    [1.0, 0.0, 0.0, 0.0]
                }
            })
            .collect(),
        scale: s
            .chunks(3)
            .map(|r| {
                [
                    r[0].exp() * anchor.scaling[0],
                    r[1].exp() * anchor.scaling[1],
                    r[2].exp() * anchor.scaling[2],
                ]
            })
            .collect(),
        degenerate_view,
    })
}

//! Global-to-local deformation: hexplane encoders, deformation decoders, the
//! straight-through dynamics mask, anchor deformation towards a segment's
//! canonical time, and per-Gaussian deformation towards the exact timestamp.

mod hexplane;
mod times;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{join, Bindings, Linear, LinearVars, Module};
use crate::scaffold::{AnchorVars, NeuralGaussians};

pub use hexplane::{query_op, HexPlane, HexPlaneConfig, HexPlaneVars, PLANE_AXES, PLANE_NAMES};
pub use times::CanonicalTimes;

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("invalid deformation setting: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid canonical times: {0}")]
    InvalidTimes(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Shared trunk followed by independent linear heads. Heads start at zero,
/// so a fresh decoder is the identity deformation.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformDecoder {
    pub trunk: Vec<Linear>,
    pub heads: Vec<(String, Linear)>,
}

impl DeformDecoder {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, depth: usize, heads: &[(&str, usize)]) -> Self {
        let mut trunk = Vec::with_capacity(depth);
        let mut width = input;
        for _ in 0..depth {
            trunk.push(Linear::new(rng, width, hidden));
            width = hidden;
        }
        Self {
            trunk,
            heads: heads.iter().map(|&(n, d)| (n.to_string(), Linear::zeros(width, d))).collect(),
        }
    }

    /// Heads `pos → 3`, `feat → F`, `offset → 3k`, `scale → 3`.
    pub fn anchor<R: Rng>(rng: &mut R, input: usize, hidden: usize, feat_dim: usize, k: usize) -> Self {
        Self::new(
            rng,
            input,
            hidden,
            2,
            &[("pos", 3), ("feat", feat_dim), ("offset", 3 * k), ("scale", 3)],
        )
    }

    /// Heads `pos → 3`, `quat → 4`, `scale → 3`, `opacity → 1`.
    pub fn gaussian<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        Self::new(rng, input, hidden, 2, &[("pos", 3), ("quat", 4), ("scale", 3), ("opacity", 1)])
    }

    pub fn head_dims(&self) -> Vec<usize> {
        self.heads.iter().map(|(_, l)| l.output()).collect()
    }

    pub fn zero_heads(&mut self) {
        for (_, h) in self.heads.iter_mut() {
            h.zero_();
        }
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> DeformDecoderVars {
        DeformDecoderVars {
            trunk: self
                .trunk
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, b, &join(prefix, &format!("trunk{i}"))))
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(n, l)| l.bind(tape, b, &join(prefix, n)))
                .collect(),
        }
    }
}

impl Module for DeformDecoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.trunk.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("trunk{i}")), f);
        }
        for (n, l) in &self.heads {
            l.visit_params(&join(prefix, n), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("trunk{i}")), f);
        }
        for (n, l) in self.heads.iter_mut() {
            l.visit_params_mut(&join(prefix, n), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeformDecoderVars {
    pub trunk: Vec<LinearVars>,
    pub heads: Vec<LinearVars>,
}

impl DeformDecoderVars {
    /// One output per head, in declaration order.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>, AutodiffError> {
        let mut h = x;
        for l in &self.trunk {
            let y = l.forward(tape, h)?;
            h = tape.relu(y);
        }
        self.heads.iter().map(|l| l.forward(tape, h)).collect()
    }
}

/// `M(d) = sg(𝟙[σ(d) > ε] − σ(d)) + σ(d)`: a hard 0/1 gate forward with the
/// sigmoid's derivative backward.
pub fn mask_dynamics(tape: &mut Tape, d: Var, epsilon: f64) -> Result<Var, AutodiffError> {
    let s = tape.sigmoid(d);
    let hard: Vec<f64> = tape
        .value(s)
        .iter()
        .map(|&v| if v > epsilon { 1.0 } else { 0.0 })
        .collect();
    let shape = tape.shape(s).to_vec();
    let hard = tape.constant(&shape, hard)?;
    let diff = tape.sub(hard, s)?;
    let diff = tape.stop_gradient(diff);
    tape.add(diff, s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GadOptions {
    pub epsilon: f64,
    /// Off: `M ≡ 1` and `σ(d_L) ≡ 1`.
    pub mask_enabled: bool,
}

fn gate(tape: &mut Tape, delta: Var, g: Option<Var>) -> Result<Var, AutodiffError> {
    match g {
        Some(g) => {
            let cols = tape.shape(delta)[1];
            let g = tape.expand_cols(g, cols)?;
            tape.mul(g, delta)
        }
        None => Ok(delta),
    }
}

/// Deforms anchors to the canonical time `t_c` of a local scaffold.
///
/// Position moves by `M(d_G)·Δx`; feature, offsets and log-scaling move by
/// `σ(d_L)·Δ`. Offsets are updated before the `l_v` product.
pub fn gad_deform(
    tape: &mut Tape,
    anchors: &AnchorVars,
    planes: &HexPlaneVars,
    decoder: &DeformDecoderVars,
    t_c: f64,
    opts: GadOptions,
) -> Result<AnchorVars, AutodiffError> {
    let h = query_op(tape, planes, anchors.positions, &[t_c])?;
    let out = decoder.forward(tape, h)?;
    let [dx, df, doff, ds] = out[..] else {
        panic!("anchor decoder must have four heads");
    };
    let (m, sl) = if opts.mask_enabled {
        (
            Some(mask_dynamics(tape, anchors.d_global, opts.epsilon)?),
            Some(tape.sigmoid(anchors.d_local)),
        )
    } else {
        (None, None)
    };
    let dx = gate(tape, dx, m)?;
    let df = gate(tape, df, sl)?;
    let doff = gate(tape, doff, sl)?;
    let ds = gate(tape, ds, sl)?;
    Ok(AnchorVars {
        positions: tape.add(anchors.positions, dx)?,
        features: tape.add(anchors.features, df)?,
        offsets: tape.add(anchors.offsets, doff)?,
        scaling: tape.add(anchors.scaling, ds)?,
        d_global: anchors.d_global,
        d_local: anchors.d_local,
    })
}

/// Deforms spawned Gaussians to timestamp `t`: additive center, raw
/// quaternion and log-scale updates, opacity re-clamped to `[0, 1]`.
pub fn lgd_deform(
    tape: &mut Tape,
    gaussians: &NeuralGaussians,
    planes: &HexPlaneVars,
    decoder: &DeformDecoderVars,
    t: f64,
) -> Result<NeuralGaussians, AutodiffError> {
    let h = query_op(tape, planes, gaussians.centers, &[t])?;
    let out = decoder.forward(tape, h)?;
    let [dc, dq, ds, dop] = out[..] else {
        panic!("gaussian decoder must have four heads");
    };
    let opacity = tape.add(gaussians.opacity, dop)?;
    Ok(NeuralGaussians {
        centers: tape.add(gaussians.centers, dc)?,
        quats: tape.add(gaussians.quats, dq)?,
        log_scales: tape.add(gaussians.log_scales, ds)?,
        opacity: tape.clamp(opacity, 0.0, 1.0),
        colors: gaussians.colors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_examples() {
        let mut tape = Tape::new();
        let d = tape.param(&Tensor::new(&[3, 1], vec![10.0, -10.0, 0.0]).unwrap());
        let m1 = mask_dynamics(&mut tape, d, 0.01).unwrap();
        assert_eq!(tape.value(m1), &[1.0, 0.0, 1.0]);
        let m2 = mask_dynamics(&mut tape, d, 0.5).unwrap();
        assert_eq!(tape.value(m2), &[1.0, 0.0, 0.0]);
        let l = tape.sum(m1);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(d).unwrap()[2], 0.25);
    }

    fn planes(rng: &mut ChaCha8Rng) -> HexPlane {
        HexPlane::new(
            HexPlaneConfig {
                resolution: [4, 4, 4, 3],
                scales: 1,
                multiplier: 2,
                channels: 3,
                bounds: [[-1.0; 3], [1.0; 3]],
            },
            rng,
        )
        .unwrap()
    }

    struct Fixture {
        tape: Tape,
        anchors: AnchorVars,
    }

    fn anchors(d_local: f64) -> Fixture {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, s: &[usize], v: Vec<f64>| tape.param(&Tensor::new(s, v).unwrap());
        let anchors = AnchorVars {
            positions: mk(&mut tape, &[2, 3], vec![0.1, 0.2, -0.3, -0.5, 0.4, 0.6]),
            offsets: mk(&mut tape, &[2, 6], vec![0.1; 12]),
            scaling: mk(&mut tape, &[2, 3], vec![-2.0; 6]),
            features: mk(&mut tape, &[2, 2], vec![0.3, -0.1, 0.2, 0.5]),
            d_global: mk(&mut tape, &[2, 1], vec![-10.0, 10.0]),
            d_local: mk(&mut tape, &[2, 1], vec![d_local; 2]),
        };
        Fixture { tape, anchors }
    }

    #[test]
    fn zero_decoder_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = planes(&mut rng);
        let dec = DeformDecoder::anchor(&mut rng, 3, 8, 2, 2);
        let Fixture { mut tape, anchors } = anchors(0.0);
        let mut b = Bindings::new();
        let hv = h.bind(&mut tape, &mut b, "h");
        let dv = dec.bind(&mut tape, &mut b, "d");
        for mask in [true, false] {
            let out = gad_deform(&mut tape, &anchors, &hv, &dv, 0.3, GadOptions { epsilon: 0.01, mask_enabled: mask }).unwrap();
            for (a, o) in [
                (anchors.positions, out.positions),
                (anchors.features, out.features),
                (anchors.offsets, out.offsets),
                (anchors.scaling, out.scaling),
            ] {
                assert_eq!(tape.value(a), tape.value(o));
            }
        }
    }

    fn biased_decoder(rng: &mut ChaCha8Rng) -> DeformDecoder {
        let mut dec = DeformDecoder::anchor(rng, 3, 8, 2, 2);
        for (_, h) in dec.heads.iter_mut() {
            h.bias.values_mut().fill(0.2);
        }
        dec
    }

    #[test]
    fn masked_position_but_updated_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = planes(&mut rng);
        let dec = biased_decoder(&mut rng);
        let Fixture { mut tape, anchors } = anchors(0.0);
        let mut b = Bindings::new();
        let hv = h.bind(&mut tape, &mut b, "h");
        let dv = dec.bind(&mut tape, &mut b, "d");
        let out = gad_deform(&mut tape, &anchors, &hv, &dv, 0.5, GadOptions { epsilon: 0.01, mask_enabled: true }).unwrap();
        // Anchor 0 has d_G = -10, so σ < ε and the mask closes.
        assert_eq!(&tape.value(out.positions)[..3], &tape.value(anchors.positions)[..3]);
        assert_ne!(&tape.value(out.positions)[3..], &tape.value(anchors.positions)[3..]);
        assert_ne!(&tape.value(out.features)[..2], &tape.value(anchors.features)[..2]);
    }

    #[test]
    fn local_gate_halves_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = planes(&mut rng);
        let dec = biased_decoder(&mut rng);
        let deltas = |d_local: f64| {
            let Fixture { mut tape, anchors } = anchors(d_local);
            let mut b = Bindings::new();
            let hv = h.bind(&mut tape, &mut b, "h");
            let dv = dec.bind(&mut tape, &mut b, "d");
            let out = gad_deform(&mut tape, &anchors, &hv, &dv, 0.5, GadOptions { epsilon: 0.01, mask_enabled: true }).unwrap();
            tape.value(out.features)
                .iter()
                .zip(tape.value(anchors.features))
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
        };
        let half = deltas(0.0);
        let full = deltas(40.0);
        for (h, f) in half.iter().zip(&full) {
            assert!((h / f - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_arities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(DeformDecoder::anchor(&mut rng, 8, 16, 32, 10).head_dims(), vec![3, 32, 30, 3]);
        assert_eq!(DeformDecoder::gaussian(&mut rng, 8, 16).head_dims(), vec![3, 4, 3, 1]);
    }
}

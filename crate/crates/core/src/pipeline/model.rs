use rand::Rng;

use super::config::{TrainConfig, Variant};
use super::PipelineError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::deform::{
    gad_deform, lgd_deform, CanonicalTimes, DeformDecoder, DeformDecoderVars, GadOptions, HexPlane, HexPlaneConfig,
    HexPlaneVars,
};
use crate::nn::{join, Bindings, Module};
use crate::render::{project_op, rasterize_op, Camera, CovarianceConvention, Raster, RenderedImage};
use crate::scaffold::{derive_gaussians, init_from_points, AnchorSet, AttributeDecoders, NeuralGaussians};

/// Hexplane encoder plus the decoder reading it.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformer {
    pub planes: HexPlane,
    pub decoder: DeformDecoder,
}

impl Deformer {
    fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> (HexPlaneVars, DeformDecoderVars) {
        (
            self.planes.bind(tape, b, &join(prefix, "planes")),
            self.decoder.bind(tape, b, &join(prefix, "decoder")),
        )
    }
}

impl Module for Deformer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.planes.visit_params(&join(prefix, "planes"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.planes.visit_params_mut(&join(prefix, "planes"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

/// Per-Gaussian parameters; opacity and color are stored as logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitGaussians {
    pub centers: Tensor,
    pub quats: Tensor,
    pub log_scales: Tensor,
    pub opacity: Tensor,
    pub colors: Tensor,
}

impl ExplicitGaussians {
    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> NeuralGaussians {
        let centers = b.param(tape, join(prefix, "centers"), &self.centers);
        let quats = b.param(tape, join(prefix, "quats"), &self.quats);
        let log_scales = b.param(tape, join(prefix, "log_scales"), &self.log_scales);
        let o = b.param(tape, join(prefix, "opacity"), &self.opacity);
        let c = b.param(tape, join(prefix, "colors"), &self.colors);
        NeuralGaussians {
            centers,
            quats,
            log_scales,
            opacity: tape.sigmoid(o),
            colors: tape.sigmoid(c),
        }
    }
}

impl Module for ExplicitGaussians {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "centers"), &self.centers);
        f(&join(prefix, "quats"), &self.quats);
        f(&join(prefix, "log_scales"), &self.log_scales);
        f(&join(prefix, "opacity"), &self.opacity);
        f(&join(prefix, "colors"), &self.colors);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "centers"), &mut self.centers);
        f(&join(prefix, "quats"), &mut self.quats);
        f(&join(prefix, "log_scales"), &mut self.log_scales);
        f(&join(prefix, "opacity"), &mut self.opacity);
        f(&join(prefix, "colors"), &mut self.colors);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Canonical {
    Scaffold { anchors: AnchorSet, decoders: AttributeDecoders },
    Explicit(ExplicitGaussians),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// The static canonical scene, time ignored.
    Global,
    /// Canonical scene plus the variant's deformation.
    Local,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }
}

/// Handles of one forward pass.
pub struct Forward {
    pub raster: Raster,
    /// `[M, 6]` projected splats.
    pub projected: Var,
    /// Final `[M, 3]` centers fed to the renderer.
    pub centers: Var,
    /// `[M, 1]` opacities fed to the renderer.
    pub opacity: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub canonical: Canonical,
    /// Anchors to the canonical time (GAD), or the first anchor stage.
    pub anchor_deform: Option<Deformer>,
    /// Anchors to the exact timestamp (anchor-only variants).
    pub anchor_local_deform: Option<Deformer>,
    /// Gaussians to the exact timestamp (LGD).
    pub gaussian_deform: Option<Deformer>,
    pub times: CanonicalTimes,
    pub gad: GadOptions,
    pub convention: CovarianceConvention,
    pub background: [f64; 3],
}

const DEFORMER_NAMES: [&str; 3] = ["gad", "anchor_local", "lgd"];

fn plane_config(c: &TrainConfig, resolution: [usize; 4], bounds: [[f64; 3]; 2]) -> HexPlaneConfig {
    HexPlaneConfig {
        resolution,
        scales: c.plane_scales,
        multiplier: c.plane_multiplier,
        channels: c.plane_channels,
        bounds,
    }
}

fn anchor_deformer<R: Rng>(c: &TrainConfig, res: [usize; 4], bounds: [[f64; 3]; 2], rng: &mut R) -> Result<Deformer, PipelineError> {
    let planes = HexPlane::new(plane_config(c, res, bounds), rng)?;
    let decoder = DeformDecoder::anchor(rng, planes.config.output_dim(), c.deform_hidden, c.feat_dim, c.n_offset);
    Ok(Deformer { planes, decoder })
}

fn gaussian_deformer<R: Rng>(c: &TrainConfig, res: [usize; 4], bounds: [[f64; 3]; 2], rng: &mut R) -> Result<Deformer, PipelineError> {
    let planes = HexPlane::new(plane_config(c, res, bounds), rng)?;
    let decoder = DeformDecoder::gaussian(rng, planes.config.output_dim(), c.deform_hidden);
    Ok(Deformer { planes, decoder })
}

/// Axis-aligned box of `points`, padded by 20% of its extent on every side.
pub fn padded_bounds(points: &[[f64; 3]]) -> [[f64; 3]; 2] {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    for a in 0..3 {
        let pad = 0.2 * (hi[a] - lo[a]).max(1e-3);
        lo[a] -= pad;
        hi[a] += pad;
    }
    [lo, hi]
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

impl Model {
    /// Fresh scaffold from initial points plus the deformers of the variant.
    pub fn new<R: Rng>(
        c: &TrainConfig,
        points: &[[f64; 3]],
        bounds: [[f64; 3]; 2],
        background: [f64; 3],
        rng: &mut R,
    ) -> Result<Self, PipelineError> {
        let anchors = init_from_points(points, c.voxel_size, c.n_offset, c.feat_dim, rng)?;
        let decoders = AttributeDecoders::new(rng, c.feat_dim, c.n_offset, c.decoder_hidden);
        let (global_res, local_res) = c.plane_resolutions();
        let variant = c.variant();
        let (mut ad, mut ald, mut gd) = (None, None, None);
        match variant {
            Variant::GlobalToLocal => {
                ad = Some(anchor_deformer(c, global_res, bounds, rng)?);
                gd = Some(gaussian_deformer(c, local_res, bounds, rng)?);
            }
            Variant::TwoStageAnchor => {
                ad = Some(anchor_deformer(c, global_res, bounds, rng)?);
                ald = Some(anchor_deformer(c, local_res, bounds, rng)?);
            }
            Variant::OneStageAnchor => ald = Some(anchor_deformer(c, local_res, bounds, rng)?),
            Variant::OneStageGaussian => gd = Some(gaussian_deformer(c, local_res, bounds, rng)?),
        }
        Ok(Self {
            variant,
            canonical: Canonical::Scaffold { anchors, decoders },
            anchor_deform: ad,
            anchor_local_deform: ald,
            gaussian_deform: gd,
            times: CanonicalTimes::uniform(c.segments)?,
            gad: GadOptions {
                epsilon: c.mask_epsilon,
                mask_enabled: c.mask_enabled,
            },
            convention: c.covariance_convention,
            background,
        })
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        match &self.canonical {
            Canonical::Scaffold { anchors, .. } => Some(anchors),
            Canonical::Explicit(_) => None,
        }
    }

    pub fn anchors_mut(&mut self) -> Option<&mut AnchorSet> {
        match &mut self.canonical {
            Canonical::Scaffold { anchors, .. } => Some(anchors),
            Canonical::Explicit(_) => None,
        }
    }

    /// Anchors, or explicit Gaussians after baking.
    pub fn primitive_count(&self) -> usize {
        match &self.canonical {
            Canonical::Scaffold { anchors, .. } => anchors.len(),
            Canonical::Explicit(e) => e.len(),
        }
    }

    /// Number of Gaussians handed to the renderer.
    pub fn gaussian_count(&self) -> usize {
        match &self.canonical {
            Canonical::Scaffold { anchors, .. } => anchors.len() * anchors.k,
            Canonical::Explicit(e) => e.len(),
        }
    }

    fn deformers(&self) -> [(&'static str, Option<&Deformer>); 3] {
        [
            (DEFORMER_NAMES[0], self.anchor_deform.as_ref()),
            (DEFORMER_NAMES[1], self.anchor_local_deform.as_ref()),
            (DEFORMER_NAMES[2], self.gaussian_deform.as_ref()),
        ]
    }

    /// Zeroes every deformation head, turning deformation into the identity.
    pub fn zero_deformation(&mut self) {
        for d in [&mut self.anchor_deform, &mut self.anchor_local_deform, &mut self.gaussian_deform]
            .into_iter()
            .flatten()
        {
            d.decoder.zero_heads();
        }
    }

    /// Canonical-scene Gaussians seen from `camera` (view-dependent decode).
    fn canonical_gaussians(
        &self,
        tape: &mut Tape,
        b: &mut Bindings,
        camera: &Camera,
        deform_anchors: &dyn Fn(&mut Tape, &mut Bindings, crate::scaffold::AnchorVars) -> Result<crate::scaffold::AnchorVars, PipelineError>,
    ) -> Result<NeuralGaussians, PipelineError> {
        match &self.canonical {
            Canonical::Scaffold { anchors, decoders } => {
                let a = anchors.bind(tape, b, "anchors");
                let d = decoders.bind(tape, b, "attr");
                let a = deform_anchors(tape, b, a)?;
                Ok(derive_gaussians(tape, &a, anchors.k, &d, camera)?)
            }
            Canonical::Explicit(e) => Ok(e.bind(tape, b, "explicit")),
        }
    }

    /// Final Gaussians at time `t` before activation of the scale.
    pub fn gaussians(
        &self,
        tape: &mut Tape,
        b: &mut Bindings,
        camera: &Camera,
        t: f64,
        stage: Stage,
    ) -> Result<NeuralGaussians, PipelineError> {
        let opts = self.gad;
        if stage == Stage::Global {
            return self.canonical_gaussians(tape, b, camera, &|_, _, a| Ok(a));
        }
        let (_, t_c) = self.times.canonical_time_of(t);
        let g = self.canonical_gaussians(tape, b, camera, &|tape, b, a| {
            let mut a = a;
            if let Some(d) = &self.anchor_deform {
                let (p, dec) = d.bind(tape, b, DEFORMER_NAMES[0]);
                a = gad_deform(tape, &a, &p, &dec, t_c, opts)?;
            }
            if let Some(d) = &self.anchor_local_deform {
                let (p, dec) = d.bind(tape, b, DEFORMER_NAMES[1]);
                a = gad_deform(tape, &a, &p, &dec, t, opts)?;
            }
            Ok(a)
        })?;
        match &self.gaussian_deform {
            Some(d) => {
                let (p, dec) = d.bind(tape, b, DEFORMER_NAMES[2]);
                Ok(lgd_deform(tape, &g, &p, &dec, t)?)
            }
            None => Ok(g),
        }
    }

    /// Records the full render of view `(camera, t)` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Bindings,
        camera: &Camera,
        t: f64,
        stage: Stage,
    ) -> Result<Forward, PipelineError> {
        let g = self.gaussians(tape, b, camera, t, stage)?;
        let r = g.to_render(tape);
        let projected = project_op(tape, r.centers, r.quats, r.scales, camera, self.convention)?;
        let raster = rasterize_op(tape, projected, r.opacity, r.colors, camera, self.background)?;
        Ok(Forward {
            raster,
            projected,
            centers: r.centers,
            opacity: r.opacity,
        })
    }

    /// Forward render without a backward pass.
    pub fn render(&self, camera: &Camera, t: f64, stage: Stage) -> Result<RenderedImage, PipelineError> {
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let f = self.forward(&mut tape, &mut b, camera, t, stage)?;
        Ok(RenderedImage {
            width: f.raster.width,
            height: f.raster.height,
            pixels: tape.value(f.raster.image).to_vec(),
            transmittance: f.raster.transmittance,
        })
    }

    /// Replaces the scaffold by the Gaussians it decodes for `camera`.
    pub fn bake_explicit(&mut self, camera: &Camera) -> Result<(), PipelineError> {
        if !matches!(self.canonical, Canonical::Scaffold { .. }) {
            return Ok(());
        }
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let g = self.gaussians(&mut tape, &mut b, camera, 0.0, Stage::Global)?;
        let n = g.len(&tape);
        let take = |tape: &Tape, v: Var, cols: usize, f: fn(f64) -> f64| -> Result<Tensor, PipelineError> {
            let vals = tape.value(v).iter().map(|&x| f(x)).collect();
            Ok(Tensor::new(&[n, cols], vals)?.into_param())
        };
        let id = |x| x;
        self.canonical = Canonical::Explicit(ExplicitGaussians {
            centers: take(&tape, g.centers, 3, id)?,
            quats: take(&tape, g.quats, 4, id)?,
            log_scales: take(&tape, g.log_scales, 3, id)?,
            opacity: take(&tape, g.opacity, 1, logit)?,
            colors: take(&tape, g.colors, 3, logit)?,
        });
        Ok(())
    }
}

impl Module for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.canonical {
            Canonical::Scaffold { anchors, decoders } => {
                anchors.visit_params(&join(prefix, "anchors"), f);
                decoders.visit_params(&join(prefix, "attr"), f);
            }
            Canonical::Explicit(e) => e.visit_params(&join(prefix, "explicit"), f),
        }
        for (name, d) in self.deformers() {
            if let Some(d) = d {
                d.visit_params(&join(prefix, name), f);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.canonical {
            Canonical::Scaffold { anchors, decoders } => {
                anchors.visit_params_mut(&join(prefix, "anchors"), f);
                decoders.visit_params_mut(&join(prefix, "attr"), f);
            }
            Canonical::Explicit(e) => e.visit_params_mut(&join(prefix, "explicit"), f),
        }
        let ds = [&mut self.anchor_deform, &mut self.anchor_local_deform, &mut self.gaussian_deform];
        for (name, d) in DEFORMER_NAMES.iter().zip(ds) {
            if let Some(d) = d {
                d.visit_params_mut(&join(prefix, name), f);
            }
        }
    }
}

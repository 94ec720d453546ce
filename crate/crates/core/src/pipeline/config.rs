use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::scene::SceneSpec;
use super::PipelineError;
use crate::render::CovarianceConvention;

/// Which deformation layout the local stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Explicit Gaussians deformed per Gaussian, one stage.
    OneStageGaussian,
    /// Anchors deformed to the exact timestamp, one stage.
    OneStageAnchor,
    /// Anchors deformed twice: to the canonical time, then to the timestamp.
    TwoStageAnchor,
    /// Anchor deformation to the canonical time, then per-Gaussian deformation.
    GlobalToLocal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub global_iters: u64,
    pub local_iters: u64,
    pub lambda_ssim: f64,

    pub lr_position: f64,
    pub lr_offset: f64,
    pub lr_scaling: f64,
    pub lr_feature: f64,
    pub lr_dynamics: f64,
    pub lr_plane: f64,
    pub lr_mlp: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Every rate decays exponentially to this fraction over a stage.
    pub lr_final_factor: f64,

    pub n_offset: usize,
    pub voxel_size: f64,
    pub feat_dim: usize,
    pub decoder_hidden: usize,
    pub deform_hidden: usize,

    pub global_plane: [usize; 4],
    pub local_plane: [usize; 4],
    pub plane_scales: usize,
    pub plane_multiplier: usize,
    pub plane_channels: usize,
    /// Spatial resolution factor applied to both planes when `large_planes`.
    pub large_plane_factor: usize,
    pub large_planes: bool,

    pub segments: usize,
    pub mask_epsilon: f64,

    pub tia_from: u64,
    pub tia_until: u64,
    pub tia_period: u64,
    pub tia_tau: f64,
    pub tia_step: f64,

    pub densify_every: u64,
    pub densify_until: u64,
    pub grow_threshold: f64,
    pub prune_opacity: f64,

    pub one_stage: bool,
    pub anchor_only_deform: bool,
    pub mask_enabled: bool,
    pub tia_enabled: bool,
    pub covariance_convention: CovarianceConvention,
    pub tia_compare_normalized: bool,

    pub log_every: u64,
    pub checkpoint_every: u64,

    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            global_iters: 3000,
            local_iters: 20_000,
            lambda_ssim: 0.2,
            lr_position: 1.6e-4,
            lr_offset: 1e-2,
            lr_scaling: 7e-3,
            lr_feature: 2e-3,
            lr_dynamics: 1e-2,
            lr_plane: 2e-3,
            lr_mlp: 1e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_final_factor: 1.0,
            n_offset: 10,
            voxel_size: 0.01,
            feat_dim: 32,
            decoder_hidden: 64,
            deform_hidden: 64,
            global_plane: [32, 32, 32, 10],
            local_plane: [64, 64, 64, 100],
            plane_scales: 2,
            plane_multiplier: 2,
            plane_channels: 8,
            large_plane_factor: 2,
            large_planes: false,
            segments: 8,
            mask_epsilon: 0.01,
            tia_from: 500,
            tia_until: 10_000,
            tia_period: 1000,
            tia_tau: 1.0,
            tia_step: 0.05,
            densify_every: 500,
            densify_until: 15_000,
            grow_threshold: 2e-4,
            prune_opacity: 5e-3,
            one_stage: false,
            anchor_only_deform: false,
            mask_enabled: true,
            tia_enabled: true,
            covariance_convention: CovarianceConvention::AsPrinted,
            tia_compare_normalized: false,
            log_every: 100,
            checkpoint_every: 0,
            scene: SceneSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.trim().parse().map_err(|_| PipelineError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PipelineError::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

pub(crate) fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], PipelineError>
where
    T: Copy + Default,
{
    let parts: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.len() != N {
        return Err(PipelineError::Config(format!("{key} needs {N} comma-separated values")));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(key, p)?;
    }
    Ok(out)
}

pub(crate) fn join_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
pub(crate) fn key_values(text: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        for (k, v) in key_values(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), PipelineError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        if let Some(sk) = key.strip_prefix("scene.") {
            return self.scene.set(sk, v);
        }
        match key {
            "seed" => self.seed = parse(key, v)?,
            "global_iters" => self.global_iters = parse(key, v)?,
            "local_iters" => self.local_iters = parse(key, v)?,
            "lambda_ssim" => self.lambda_ssim = parse(key, v)?,
            "lr_position" => self.lr_position = parse(key, v)?,
            "lr_offset" => self.lr_offset = parse(key, v)?,
            "lr_scaling" => self.lr_scaling = parse(key, v)?,
            "lr_feature" => self.lr_feature = parse(key, v)?,
            "lr_dynamics" => self.lr_dynamics = parse(key, v)?,
            "lr_plane" => self.lr_plane = parse(key, v)?,
            "lr_mlp" => self.lr_mlp = parse(key, v)?,
            "lr_rotation" => self.lr_rotation = parse(key, v)?,
            "lr_opacity" => self.lr_opacity = parse(key, v)?,
            "lr_color" => self.lr_color = parse(key, v)?,
            "lr_final_factor" => self.lr_final_factor = parse(key, v)?,
            "n_offset" => self.n_offset = parse(key, v)?,
            "voxel_size" => self.voxel_size = parse(key, v)?,
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, v)?,
            "deform_hidden" => self.deform_hidden = parse(key, v)?,
            "global_plane" => self.global_plane = parse_list(key, v)?,
            "local_plane" => self.local_plane = parse_list(key, v)?,
            "plane_scales" => self.plane_scales = parse(key, v)?,
            "plane_multiplier" => self.plane_multiplier = parse(key, v)?,
            "plane_channels" => self.plane_channels = parse(key, v)?,
            "large_plane_factor" => self.large_plane_factor = parse(key, v)?,
            "large_planes" => self.large_planes = parse_bool(key, v)?,
            "segments" => self.segments = parse(key, v)?,
            "mask_epsilon" => self.mask_epsilon = parse(key, v)?,
            "tia_from" => self.tia_from = parse(key, v)?,
            "tia_until" => self.tia_until = parse(key, v)?,
            "tia_period" => self.tia_period = parse(key, v)?,
            "tia_tau" => self.tia_tau = parse(key, v)?,
            "tia_step" => self.tia_step = parse(key, v)?,
            "densify_every" => self.densify_every = parse(key, v)?,
            "densify_until" => self.densify_until = parse(key, v)?,
            "grow_threshold" => self.grow_threshold = parse(key, v)?,
            "prune_opacity" => self.prune_opacity = parse(key, v)?,
            "one_stage" => self.one_stage = parse_bool(key, v)?,
            "anchor_only_deform" => self.anchor_only_deform = parse_bool(key, v)?,
            "mask_enabled" => self.mask_enabled = parse_bool(key, v)?,
            "tia_enabled" => self.tia_enabled = parse_bool(key, v)?,
            "covariance_convention" => {
                self.covariance_convention = v.parse().map_err(|e: String| PipelineError::Config(e))?
            }
            "tia_compare_normalized" => self.tia_compare_normalized = parse_bool(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.global_iters == 0 || self.local_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if !(0.0..1.0).contains(&self.lambda_ssim) {
            return bad("lambda_ssim must lie in [0, 1)");
        }
        if self.n_offset == 0 || self.feat_dim == 0 || self.decoder_hidden == 0 || self.deform_hidden == 0 {
            return bad("n_offset, feat_dim and hidden widths must be positive");
        }
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size must be positive");
        }
        if self.segments == 0 {
            return bad("segments must be at least 1");
        }
        if self.large_plane_factor == 0 {
            return bad("large_plane_factor must be positive");
        }
        self.scene.validate()
    }

    pub fn variant(&self) -> Variant {
        match (self.one_stage, self.anchor_only_deform) {
            (true, false) => Variant::OneStageGaussian,
            (true, true) => Variant::OneStageAnchor,
            (false, true) => Variant::TwoStageAnchor,
            (false, false) => Variant::GlobalToLocal,
        }
    }

    fn scaled(&self, r: [usize; 4]) -> [usize; 4] {
        let f = if self.large_planes { self.large_plane_factor } else { 1 };
        [r[0] * f, r[1] * f, r[2] * f, r[3]]
    }

    /// Effective resolutions of the global and local planes.
    pub fn plane_resolutions(&self) -> ([usize; 4], [usize; 4]) {
        (self.scaled(self.global_plane), self.scaled(self.local_plane))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("seed", self.seed.to_string());
        put("global_iters", self.global_iters.to_string());
        put("local_iters", self.local_iters.to_string());
        put("lambda_ssim", self.lambda_ssim.to_string());
        put("lr_position", self.lr_position.to_string());
        put("lr_offset", self.lr_offset.to_string());
        put("lr_scaling", self.lr_scaling.to_string());
        put("lr_feature", self.lr_feature.to_string());
        put("lr_dynamics", self.lr_dynamics.to_string());
        put("lr_plane", self.lr_plane.to_string());
        put("lr_mlp", self.lr_mlp.to_string());
        put("lr_rotation", self.lr_rotation.to_string());
        put("lr_opacity", self.lr_opacity.to_string());
        put("lr_color", self.lr_color.to_string());
        put("lr_final_factor", self.lr_final_factor.to_string());
        put("n_offset", self.n_offset.to_string());
        put("voxel_size", self.voxel_size.to_string());
        put("feat_dim", self.feat_dim.to_string());
        put("decoder_hidden", self.decoder_hidden.to_string());
        put("deform_hidden", self.deform_hidden.to_string());
        put("global_plane", join_list(&self.global_plane));
        put("local_plane", join_list(&self.local_plane));
        put("plane_scales", self.plane_scales.to_string());
        put("plane_multiplier", self.plane_multiplier.to_string());
        put("plane_channels", self.plane_channels.to_string());
        put("large_plane_factor", self.large_plane_factor.to_string());
        put("large_planes", self.large_planes.to_string());
        put("segments", self.segments.to_string());
        put("mask_epsilon", self.mask_epsilon.to_string());
        put("tia_from", self.tia_from.to_string());
        put("tia_until", self.tia_until.to_string());
        put("tia_period", self.tia_period.to_string());
        put("tia_tau", self.tia_tau.to_string());
        put("tia_step", self.tia_step.to_string());
        put("densify_every", self.densify_every.to_string());
        put("densify_until", self.densify_until.to_string());
        put("grow_threshold", self.grow_threshold.to_string());
        put("prune_opacity", self.prune_opacity.to_string());
        put("one_stage", self.one_stage.to_string());
        put("anchor_only_deform", self.anchor_only_deform.to_string());
        put("mask_enabled", self.mask_enabled.to_string());
        put("tia_enabled", self.tia_enabled.to_string());
        put("covariance_convention", self.covariance_convention.to_string());
        put("tia_compare_normalized", self.tia_compare_normalized.to_string());
        put("log_every", self.log_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        for (k, v) in self.scene.entries() {
            put(&format!("scene.{k}"), v);
        }
        s
    }

    /// FNV-1a over the canonical text form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

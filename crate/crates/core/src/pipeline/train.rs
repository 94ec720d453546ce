use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::storage_bytes;
use super::config::{TrainConfig, Variant};
use super::loss::photometric_loss;
use super::metrics::{psnr, ssim};
use super::model::{padded_bounds, Model, Stage};
use super::optim::{Adam, LrGroup};
use super::scene::{Split, SyntheticScene};
use super::PipelineError;
use crate::autodiff::Tape;
use crate::nn::{Bindings, Module};
use crate::tia::{TiaSchedule, TiaState};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub stage: Stage,
    pub iter: u64,
    pub loss: f64,
    /// PSNR of the sampled training view.
    pub psnr: f64,
    pub anchors: usize,
    pub canonical_times: Vec<f64>,
}

impl LogRecord {
    /// `iter  loss  psnr  anchors  t_c,…`
    pub fn line(&self) -> String {
        let tc: Vec<String> = self.canonical_times.iter().map(|t| format!("{t:.6}")).collect();
        format!("{}\t{:.8}\t{:.4}\t{}\t{}", self.iter, self.loss, self.psnr, self.anchors, tc.join(","))
    }
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub tia: Option<TiaState>,
    pub stage: Stage,
    /// Iterations completed in the current stage.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub log: Vec<LogRecord>,
}

/// Per-view metrics of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetric {
    pub frame: usize,
    pub camera: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub psnr: f64,
    pub ssim: f64,
    pub storage_bytes: u64,
    pub per_frame: Vec<FrameMetric>,
}

fn canonical_times(model: &Model) -> Vec<f64> {
    (0..model.times.segments())
        .map(|j| {
            let (a, b) = model.times.interval(j);
            0.5 * (a + b)
        })
        .collect()
}

impl TrainState {
    /// Fresh model seeded from the scene's initial points.
    pub fn new(scene: &SyntheticScene, config: &TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bounds = padded_bounds(&scene.init_points);
        let model = Model::new(config, &scene.init_points, bounds, scene.spec.background, &mut init_rng)?;
        Ok(Self {
            config: config.clone(),
            model,
            adam: Adam::default(),
            tia: None,
            stage: Stage::Global,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_f1e1d),
            log: Vec::new(),
        })
    }

    fn stage_iters(&self) -> u64 {
        match self.stage {
            Stage::Global => self.config.global_iters,
            Stage::Local => self.config.local_iters,
        }
    }

    pub fn stage_done(&self) -> bool {
        self.iteration >= self.stage_iters()
    }

    /// Exponential decay factor of every learning rate at the current step.
    fn lr_decay(&self) -> f64 {
        let total = self.stage_iters().max(2) - 1;
        let progress = (self.iteration.saturating_sub(1)) as f64 / total as f64;
        self.config.lr_final_factor.powf(progress.min(1.0))
    }

    /// Switches to the local stage: bakes explicit Gaussians for the
    /// one-stage Gaussian variant and sets up interval adjustment.
    pub fn begin_local(&mut self, scene: &SyntheticScene) -> Result<(), PipelineError> {
        if self.config.variant() == Variant::OneStageGaussian {
            self.model.bake_explicit(&scene.cameras[0])?;
            let mut names = std::collections::HashSet::new();
            self.model.visit_params("", &mut |n, _| {
                names.insert(n.to_string());
            });
            self.adam.state.retain(|k, _| names.contains(k));
        }
        if self.config.tia_enabled {
            let mut tia = TiaState::new(
                self.model.times.clone(),
                TiaSchedule {
                    from: self.config.tia_from,
                    until: self.config.tia_until,
                    period: self.config.tia_period,
                },
                self.config.tia_tau,
                self.config.tia_step,
            );
            tia.compare_normalized = self.config.tia_compare_normalized;
            self.tia = Some(tia);
        }
        self.stage = Stage::Local;
        self.iteration = 0;
        Ok(())
    }

    /// One optimization step of the current stage; returns the loss.
    pub fn step(&mut self, scene: &SyntheticScene) -> Result<f64, PipelineError> {
        let views = scene.views(Split::Train);
        let (frame, cam) = views[self.rng.random_range(0..views.len())];
        let camera = &scene.cameras[cam];
        let t = scene.timestamps[frame];
        let gt = &scene.frames[frame][cam].pixels;
        self.iteration += 1;
        let iter = self.iteration;

        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let f = self.model.forward(&mut tape, &mut b, camera, t, self.stage)?;
        let loss = photometric_loss(&mut tape, f.raster.image, gt, self.config.lambda_ssim)?;
        let loss_value = tape.item(loss);
        if !loss_value.is_finite() {
            return Err(PipelineError::Diverged {
                stage: self.stage.name(),
                iter,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;
        b.pull_grads(&tape, &mut self.model);

        let densify = self.stage == Stage::Global;
        if densify {
            let (w, h) = (camera.width as f64, camera.height as f64);
            let p = tape.value(f.projected);
            let gp = tape.grad(f.projected);
            let rows = p.len() / 6;
            let mut norms = vec![0.0; rows];
            let mut visible = vec![false; rows];
            for i in 0..rows {
                let r = &p[i * 6..i * 6 + 6];
                visible[i] = r[5] > camera.near && (r[2] != 0.0 || r[4] != 0.0);
                if let Some(g) = gp {
                    let gx = g[i * 6] * 0.5 * w;
                    let gy = g[i * 6 + 1] * 0.5 * h;
                    norms[i] = (gx * gx + gy * gy).sqrt();
                }
            }
            let opacity = tape.value(f.opacity).to_vec();
            if let Some(a) = self.model.anchors_mut() {
                a.accumulate_growth(&norms, &visible);
                a.accumulate_opacity(&opacity);
            }
        }
        if let Some(tia) = self.tia.as_mut().filter(|tia| tia.in_window(iter)) {
            let g = tape.grad(f.centers).map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(0.0);
            tia.accumulate(t, g);
        }

        let home = self.model.anchors().map(|a| a.cells());
        let decay = self.lr_decay();
        let config = &self.config;
        self.adam.step(&mut self.model, &|name| LrGroup::of(name).base_rate(config) * decay);
        if let (Some(home), Some(a)) = (home, self.model.anchors_mut()) {
            a.clamp_to_cells(&home);
        }

        if densify
            && self.config.densify_every > 0
            && iter % self.config.densify_every == 0
            && iter < self.config.densify_until
            && iter < self.config.global_iters
        {
            self.densify();
        }
        if let Some(tia) = self.tia.as_mut() {
            if tia.adjust(iter) {
                self.model.times = tia.times.clone();
            }
        }

        if self.config.log_every > 0 && (iter % self.config.log_every == 0 || iter == self.stage_iters()) {
            self.log.push(LogRecord {
                stage: self.stage,
                iter,
                loss: loss_value,
                psnr: psnr(tape.value(f.raster.image), gt),
                anchors: self.model.primitive_count(),
                canonical_times: canonical_times(&self.model),
            });
        }
        Ok(loss_value)
    }

    /// Grows anchors under high-gradient Gaussians, then prunes transparent ones.
    fn densify(&mut self) {
        let (grow, prune) = (self.config.grow_threshold, self.config.prune_opacity);
        let Some(a) = self.model.anchors_mut() else { return };
        let before = a.len();
        let stats = a.stats.clone();
        let added = a.grow_anchors(grow);
        a.stats.opacity_sum[..before].copy_from_slice(&stats.opacity_sum);
        a.stats.opacity_count[..before].copy_from_slice(&stats.opacity_count);
        let report = a.prune_anchors(prune);
        if added > 0 || report.removed > 0 {
            log::debug!("densify: +{added} -{} anchors", report.removed);
        }
        self.adam.extend_rows("anchors/", before, added);
        self.adam.retain_rows("anchors/", &report.keep);
    }

    /// Copy of a finished global stage re-targeted at another local-stage
    /// configuration: the canonical scene, optimizer moments and sampling
    /// state carry over, deformers start fresh.
    pub fn branch(&self, scene: &SyntheticScene, config: &TrainConfig) -> Result<TrainState, PipelineError> {
        if self.stage != Stage::Global || !self.stage_done() {
            return Err(PipelineError::Config("branching needs a finished global stage".into()));
        }
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bounds = padded_bounds(&scene.init_points);
        let mut model = Model::new(config, &scene.init_points, bounds, scene.spec.background, &mut init_rng)?;
        model.canonical = self.model.canonical.clone();
        Ok(TrainState {
            config: config.clone(),
            model,
            adam: self.adam.clone(),
            tia: None,
            stage: Stage::Global,
            iteration: self.iteration,
            rng: self.rng.clone(),
            log: self.log.clone(),
        })
    }

    /// Runs the current stage to completion; `hook` sees every finished step.
    pub fn run_stage(
        &mut self,
        scene: &SyntheticScene,
        hook: &mut dyn FnMut(&TrainState) -> Result<(), PipelineError>,
    ) -> Result<(), PipelineError> {
        while !self.stage_done() {
            self.step(scene)?;
            hook(self)?;
        }
        Ok(())
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.line() + "\n").collect()
    }
}

/// Trains the static canonical scaffold on every training frame.
pub fn train_global(scene: &SyntheticScene, config: &TrainConfig) -> Result<TrainState, PipelineError> {
    let mut s = TrainState::new(scene, config)?;
    s.run_stage(scene, &mut |_| Ok(()))?;
    Ok(s)
}

/// Continues a globally trained state through the local stage.
pub fn train_local(state: &mut TrainState, scene: &SyntheticScene) -> Result<(), PipelineError> {
    if state.stage == Stage::Global {
        if !state.stage_done() {
            return Err(PipelineError::Config("the local stage needs a finished global stage".into()));
        }
        state.begin_local(scene)?;
    }
    state.run_stage(scene, &mut |_| Ok(()))
}

/// Both stages.
pub fn train(scene: &SyntheticScene, config: &TrainConfig) -> Result<TrainState, PipelineError> {
    let mut s = train_global(scene, config)?;
    train_local(&mut s, scene)?;
    Ok(s)
}

/// Renders every view of `split` in parallel and scores it.
pub fn evaluate(model: &Model, scene: &SyntheticScene, split: Split, stage: Stage) -> Result<EvalRecord, PipelineError> {
    let views = scene.views(split);
    if views.is_empty() {
        return Err(PipelineError::Config("evaluation split is empty".into()));
    }
    let per_frame = views
        .par_iter()
        .map(|&(frame, cam)| {
            let t = scene.timestamps[frame];
            let img = model.render(&scene.cameras[cam], t, stage)?;
            let gt = &scene.frames[frame][cam];
            Ok(FrameMetric {
                frame,
                camera: cam,
                time: t,
                psnr: psnr(&img.pixels, &gt.pixels),
                ssim: ssim(&img.pixels, &gt.pixels, gt.width, gt.height),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let n = per_frame.len() as f64;
    Ok(EvalRecord {
        psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        storage_bytes: storage_bytes(model),
        per_frame,
    })
}

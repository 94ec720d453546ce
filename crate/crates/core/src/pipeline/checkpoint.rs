//! Versioned little-endian container of named tensor blocks.
//!
//! Layout: `MDGS`, `u32` version, then blocks of
//! `u32 name_len · name · u8 dtype · u32 rank · u64 dims[rank] · u64 payload_len · payload`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{Canonical, ExplicitGaussians, Model, Stage};
use super::optim::{Adam, Moments};
use super::train::TrainState;
use super::PipelineError;
use crate::autodiff::Tensor;
use crate::deform::CanonicalTimes;
use crate::nn::Module;
use crate::render::Camera;
use crate::tia::{parse_interval_log, TiaSchedule, TiaState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MDGS";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    Utf8(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Block {
    pub fn f64(name: impl Into<String>, dims: &[usize], values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u64).collect(),
            payload: Payload::F64(values),
        }
    }

    pub fn text(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            name: name.into(),
            dims: vec![text.len() as u64],
            payload: Payload::Utf8(text),
        }
    }

    fn payload_len(&self) -> u64 {
        match &self.payload {
            Payload::F64(v) => 8 * v.len() as u64,
            Payload::Utf8(s) => s.len() as u64,
        }
    }

    /// Bytes this block occupies on disk.
    pub fn size(&self) -> u64 {
        4 + self.name.len() as u64 + 1 + 4 + 8 * self.dims.len() as u64 + 8 + self.payload_len()
    }

    fn values(&self) -> Result<&[f64], PipelineError> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            Payload::Utf8(_) => Err(PipelineError::Checkpoint(format!("block {} is not numeric", self.name))),
        }
    }

    fn text_value(&self) -> Result<&str, PipelineError> {
        match &self.payload {
            Payload::Utf8(s) => Ok(s),
            Payload::F64(_) => Err(PipelineError::Checkpoint(format!("block {} is not text", self.name))),
        }
    }

    fn tensor(&self) -> Result<Tensor, PipelineError> {
        let dims: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        Ok(Tensor::new(&dims, self.values()?.to_vec())?)
    }
}

pub fn write_container(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + blocks.iter().map(Block::size).sum::<u64>() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(match b.payload {
            Payload::F64(_) => 0,
            Payload::Utf8(_) => 1,
        });
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for d in &b.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&b.payload_len().to_le_bytes());
        match &b.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Utf8(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PipelineError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<Block>, PipelineError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(PipelineError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut blocks = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| PipelineError::Checkpoint("block name is not utf-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let len = r.u64()? as usize;
        let raw = r.take(len)?;
        let payload = match dtype {
            0 => {
                if len % 8 != 0 || dims.iter().product::<u64>() as usize * 8 != len {
                    return Err(PipelineError::Checkpoint(format!("block {name}: payload does not match dims")));
                }
                Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            }
            1 => Payload::Utf8(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| PipelineError::Checkpoint(format!("block {name}: invalid utf-8")))?,
            ),
            d => return Err(PipelineError::Checkpoint(format!("block {name}: unknown dtype {d}"))),
        };
        blocks.push(Block { name, dims, payload });
    }
    Ok(blocks)
}

/// Blocks describing the renderable model: parameters, canonical times and
/// hexplane bounds.
pub fn model_blocks(model: &Model) -> Vec<Block> {
    let mut out = Vec::new();
    model.visit_params("model", &mut |name, t| {
        out.push(Block::f64(name, t.shape(), t.values().to_vec()));
    });
    let b = model.times.boundaries();
    out.push(Block::f64("model/times", &[b.len()], b.to_vec()));
    let bounds = model_bounds(model);
    out.push(Block::f64("model/hexplane_bounds", &[2, 3], bounds.concat()));
    out
}

fn model_bounds(model: &Model) -> [[f64; 3]; 2] {
    [&model.anchor_deform, &model.anchor_local_deform, &model.gaussian_deform]
        .into_iter()
        .flatten()
        .map(|d| d.planes.config.bounds)
        .next()
        .unwrap_or([[0.0; 3], [1.0; 3]])
}

/// Serialized size of the model blocks.
pub fn storage_bytes(model: &Model) -> u64 {
    model_blocks(model).iter().map(Block::size).sum()
}

/// `(name, bytes)` of each model block.
pub fn block_sizes(model: &Model) -> Vec<(String, u64)> {
    model_blocks(model).into_iter().map(|b| (b.name.clone(), b.size())).collect()
}

/// Canonical-scene blocks only (anchors and attribute decoders, or
/// explicit Gaussians).
pub fn canonical_blocks(model: &Model) -> Vec<Block> {
    model_blocks(model)
        .into_iter()
        .filter(|b| ["model/anchors/", "model/attr/", "model/explicit/"].iter().any(|p| b.name.starts_with(p)))
        .collect()
}

/// Per-Gaussian dump of what the canonical scaffold decodes for `camera`:
/// 14 values per Gaussian (center, quaternion, log-scale, opacity and color logits).
pub fn explicit_dump(model: &Model, camera: &Camera) -> Result<Vec<Block>, PipelineError> {
    let mut baked = model.clone();
    baked.bake_explicit(camera)?;
    Ok(canonical_blocks(&baked))
}

/// Container size of [`explicit_dump`].
pub fn explicit_dump_bytes(model: &Model, camera: &Camera) -> Result<u64, PipelineError> {
    Ok(8 + explicit_dump(model, camera)?.iter().map(Block::size).sum::<u64>())
}

/// Everything needed to resume training or render.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub tia: Option<TiaState>,
    pub stage: Stage,
    pub iteration: u64,
    pub cameras: Vec<Camera>,
}

impl Checkpoint {
    pub fn into_state(self) -> TrainState {
        TrainState {
            rng: ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0f_f1e1d ^ self.iteration),
            config: self.config,
            model: self.model,
            adam: self.adam,
            tia: self.tia,
            stage: self.stage,
            iteration: self.iteration,
            log: Vec::new(),
        }
    }
}

pub fn checkpoint_blocks(state: &TrainState, cameras: &[Camera]) -> Vec<Block> {
    let mut out = model_blocks(&state.model);
    out.push(Block::text("meta/config", state.config.to_text()));
    out.push(Block::f64("meta/iteration", &[1], vec![state.iteration as f64]));
    let stage = match state.stage {
        Stage::Global => 0.0,
        Stage::Local => 1.0,
    };
    out.push(Block::f64("meta/stage", &[1], vec![stage]));
    out.push(Block::text("meta/config_hash", format!("{:016x}", state.config.hash())));
    if let Some(tia) = &state.tia {
        out.push(Block::f64("tia/g_acc", &[tia.g_acc.len()], tia.g_acc.clone()));
        out.push(Block::f64(
            "tia/nu_acc",
            &[tia.nu_acc.len()],
            tia.nu_acc.iter().map(|&n| n as f64).collect(),
        ));
        out.push(Block::text("tia/log", tia.log_text()));
    }
    for (name, mo) in &state.adam.state {
        out.push(Block::f64(format!("optim/{name}/m"), &[mo.m.len()], mo.m.clone()));
        out.push(Block::f64(format!("optim/{name}/v"), &[mo.v.len()], mo.v.clone()));
        out.push(Block::f64(format!("optim/{name}/t"), &[1], vec![mo.t as f64]));
    }
    if let Some(a) = state.model.anchors() {
        let s = &a.stats;
        out.push(Block::f64("stats/grad_sum", &[s.grad_sum.len()], s.grad_sum.clone()));
        out.push(Block::f64("stats/grad_count", &[s.grad_count.len()], s.grad_count.iter().map(|&c| c as f64).collect()));
        out.push(Block::f64("stats/opacity_sum", &[s.opacity_sum.len()], s.opacity_sum.clone()));
        out.push(Block::f64(
            "stats/opacity_count",
            &[s.opacity_count.len()],
            s.opacity_count.iter().map(|&c| c as f64).collect(),
        ));
    }
    out.push(Block::f64(
        "scene/cameras",
        &[cameras.len(), 23],
        cameras.iter().flat_map(|c| c.to_flat()).collect(),
    ));
    out.push(Block::f64("scene/background", &[3], state.model.background.to_vec()));
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cameras: &[Camera]) -> Result<u64, PipelineError> {
    let bytes = write_container(&checkpoint_blocks(state, cameras));
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    checkpoint_from_blocks(read_container(&std::fs::read(path)?)?)
}

fn scalar(blocks: &std::collections::HashMap<&str, &Block>, name: &str) -> Result<f64, PipelineError> {
    let b = need(blocks, name)?;
    b.values()?.first().copied().ok_or_else(|| PipelineError::Checkpoint(format!("block {name} is empty")))
}

fn need<'a>(blocks: &std::collections::HashMap<&str, &'a Block>, name: &str) -> Result<&'a Block, PipelineError> {
    blocks.get(name).copied().ok_or_else(|| PipelineError::Checkpoint(format!("missing block {name}")))
}

pub fn checkpoint_from_blocks(blocks: Vec<Block>) -> Result<Checkpoint, PipelineError> {
    let map: std::collections::HashMap<&str, &Block> = blocks.iter().map(|b| (b.name.as_str(), b)).collect();
    let config = TrainConfig::from_text(need(&map, "meta/config")?.text_value()?)?;
    let hash = need(&map, "meta/config_hash")?.text_value()?;
    if hash != format!("{:016x}", config.hash()) {
        return Err(PipelineError::Checkpoint("config hash mismatch".into()));
    }
    let bv = need(&map, "model/hexplane_bounds")?.values()?;
    if bv.len() != 6 {
        return Err(PipelineError::Checkpoint("hexplane bounds need 6 values".into()));
    }
    let bounds = [[bv[0], bv[1], bv[2]], [bv[3], bv[4], bv[5]]];
    let bg = need(&map, "scene/background")?.values()?;
    if bg.len() != 3 {
        return Err(PipelineError::Checkpoint("background needs 3 values".into()));
    }
    let background = [bg[0], bg[1], bg[2]];

    // Skeleton with the right structure; every tensor is then replaced.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(&config, &[[0.0; 3]], bounds, background, &mut rng)?;
    if map.contains_key("model/explicit/centers") {
        let z = || Tensor::zeros(&[0]);
        model.canonical = Canonical::Explicit(ExplicitGaussians {
            centers: z(),
            quats: z(),
            log_scales: z(),
            opacity: z(),
            colors: z(),
        });
    }
    let mut missing = None;
    let mut bad = None;
    model.visit_params_mut("model", &mut |name, t| match map.get(name) {
        Some(b) => match b.tensor() {
            Ok(v) => *t = v.into_param(),
            Err(e) => bad = Some(e),
        },
        None => missing = Some(name.to_string()),
    });
    if let Some(name) = missing {
        return Err(PipelineError::Checkpoint(format!("missing block {name}")));
    }
    if let Some(e) = bad {
        return Err(e);
    }
    model.times = CanonicalTimes::from_boundaries(need(&map, "model/times")?.values()?.to_vec())?;
    if let Some(a) = model.anchors_mut() {
        a.reset_stats();
        let n = a.len();
        let nk = n * a.k;
        let get = |name: &str, len: usize| -> Option<Vec<f64>> {
            map.get(name).and_then(|b| b.values().ok()).filter(|v| v.len() == len).map(<[f64]>::to_vec)
        };
        if let (Some(gs), Some(gc), Some(os), Some(oc)) = (
            get("stats/grad_sum", nk),
            get("stats/grad_count", nk),
            get("stats/opacity_sum", n),
            get("stats/opacity_count", n),
        ) {
            a.stats.grad_sum = gs;
            a.stats.grad_count = gc.iter().map(|&c| c as u32).collect();
            a.stats.opacity_sum = os;
            a.stats.opacity_count = oc.iter().map(|&c| c as u32).collect();
        }
    }

    let stage = if scalar(&map, "meta/stage")? == 0.0 { Stage::Global } else { Stage::Local };
    let iteration = scalar(&map, "meta/iteration")? as u64;

    let mut adam = Adam::default();
    for b in &blocks {
        let Some(name) = b.name.strip_prefix("optim/").and_then(|n| n.strip_suffix("/m")) else {
            continue;
        };
        let v = need(&map, &format!("optim/{name}/v"))?.values()?.to_vec();
        let t = scalar(&map, &format!("optim/{name}/t"))? as u64;
        adam.state.insert(
            name.to_string(),
            Moments {
                m: b.values()?.to_vec(),
                v,
                t,
            },
        );
    }

    let tia = match map.get("tia/g_acc") {
        Some(g) => {
            let mut tia = TiaState::new(
                model.times.clone(),
                TiaSchedule {
                    from: config.tia_from,
                    until: config.tia_until,
                    period: config.tia_period,
                },
                config.tia_tau,
                config.tia_step,
            );
            tia.compare_normalized = config.tia_compare_normalized;
            tia.g_acc = g.values()?.to_vec();
            tia.nu_acc = need(&map, "tia/nu_acc")?.values()?.iter().map(|&n| n as u64).collect();
            if tia.g_acc.len() != model.times.segments() || tia.nu_acc.len() != tia.g_acc.len() {
                return Err(PipelineError::Checkpoint("tia accumulators do not match the segments".into()));
            }
            tia.log = parse_interval_log(need(&map, "tia/log")?.text_value()?)
                .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
            Some(tia)
        }
        None => None,
    };

    let cams = need(&map, "scene/cameras")?.values()?;
    let cameras = cams.chunks_exact(23).map(Camera::from_flat).collect::<Result<Vec<_>, _>>()?;
    Ok(Checkpoint {
        config,
        model,
        adam,
        tia,
        stage,
        iteration,
        cameras,
    })
}

use std::fmt::Write as _;

use super::config::TrainConfig;
use super::model::Stage;
use super::scene::{Split, SyntheticScene};
use super::train::{evaluate, train_global, train_local, EvalRecord};
use super::PipelineError;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub description: &'static str,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub eval: EvalRecord,
    pub gaussians: usize,
}

/// Rows (a) … (g): from one-stage Gaussian deformation to the full model.
pub fn ablation_rows(base: &TrainConfig) -> Vec<AblationRow> {
    let mk = |label, description, one_stage, anchor_only, large, mask, tia| {
        let mut c = base.clone();
        c.one_stage = one_stage;
        c.anchor_only_deform = anchor_only;
        c.large_planes = large;
        c.mask_enabled = mask;
        c.tia_enabled = tia;
        AblationRow { label, description, config: c }
    };
    vec![
        mk("(a)", "one-stage Gaussian deformation", true, false, true, false, false),
        mk("(b)", "one-stage anchor deformation", true, true, true, false, false),
        mk("(c)", "two-stage anchor deformation", false, true, true, false, false),
        mk("(d)", "global anchor + local Gaussian deformation", false, false, true, false, false),
        mk("(e)", "(d) with compact planes", false, false, false, false, false),
        mk("(f)", "(e) with dynamics mask", false, false, false, true, false),
        mk("(g)", "(f) with interval adjustment", false, false, false, true, true),
    ]
}

/// Trains one shared global stage, then every row's local stage on top of it.
pub fn run_ablation(
    scene: &SyntheticScene,
    base: &TrainConfig,
    progress: &mut dyn FnMut(&AblationResult),
) -> Result<Vec<AblationResult>, PipelineError> {
    let global = train_global(scene, base)?;
    let mut out = Vec::new();
    for row in ablation_rows(base) {
        let mut s = global.branch(scene, &row.config)?;
        train_local(&mut s, scene)?;
        let eval = evaluate(&s.model, scene, Split::Test, Stage::Local)?;
        let r = AblationResult {
            gaussians: s.model.gaussian_count(),
            row,
            eval,
        };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

/// Markdown comparison table.
pub fn format_table(results: &[AblationResult]) -> String {
    let mut s = String::new();
    writeln!(s, "| row | setting | PSNR (dB) | SSIM | storage (bytes) | Gaussians |").expect("string write");
    writeln!(s, "|---|---|---:|---:|---:|---:|").expect("string write");
    for r in results {
        writeln!(
            s,
            "| {} | {} | {:.2} | {:.4} | {} | {} |",
            r.row.label, r.row.description, r.eval.psnr, r.eval.ssim, r.eval.storage_bytes, r.gaussians
        )
        .expect("string write");
    }
    s
}

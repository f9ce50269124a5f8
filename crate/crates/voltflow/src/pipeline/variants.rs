//! The experiment-variant registry. Each variant is one training recipe —
//! which stages run and how the guidance operator is handled — behind a
//! common trait object, so the suite and the CLI stay recipe-agnostic and
//! new variants plug in without touching the orchestration.

use super::{
    build_corpora, evaluate, run_stage1, run_stage2, run_stage2_live, run_stage3, task_rng,
    write_text, Corpora, MetricsReport, PipelineError, RefineDiagnostics,
};
use crate::config::RunConfig;
use crate::flow::VelocityField;
use crate::fno::FnoModel;
use crate::hierarchy::Hierarchy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Everything a trained variant hands to evaluation.
pub struct TrainedBundle {
    /// Guidance operator, frozen — absent for the unguided variant.
    pub fno: Option<FnoModel>,
    pub field: VelocityField,
    /// Constraint hierarchy — absent when refinement is skipped.
    pub hierarchy: Option<Hierarchy>,
    pub refine: Option<RefineDiagnostics>,
}

/// One training recipe over the shared stage machinery.
pub trait TrainingVariant {
    /// Name from the closed set `freeze[-k] | scratch | finetune | pure-cfm`.
    fn name(&self) -> String;
    fn run(&self, config: &RunConfig, corpora: &Corpora)
        -> Result<TrainedBundle, PipelineError>;
}

/// `true` for names in the closed variant set.
pub fn is_canonical_variant_name(name: &str) -> bool {
    match name {
        "freeze" | "scratch" | "finetune" | "pure-cfm" => true,
        _ => name
            .strip_prefix("freeze-")
            .is_some_and(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit())),
    }
}

/// Look a variant up by its canonical name.
pub fn variant_by_name(name: &str) -> Option<Box<dyn TrainingVariant>> {
    match name {
        "freeze" => Some(Box::new(FreezeVariant { frozen_layers: None })),
        "scratch" => Some(Box::new(ScratchVariant)),
        "finetune" => Some(Box::new(FinetuneVariant)),
        "pure-cfm" => Some(Box::new(PureCfmVariant)),
        _ => {
            let k = name.strip_prefix("freeze-")?.parse().ok()?;
            Some(Box::new(FreezeVariant { frozen_layers: Some(k) }))
        }
    }
}

/// The four recipes the comparison suite runs.
pub fn registry() -> Vec<Box<dyn TrainingVariant>> {
    vec![
        Box::new(FreezeVariant { frozen_layers: None }),
        Box::new(ScratchVariant),
        Box::new(FinetuneVariant),
        Box::new(PureCfmVariant),
    ]
}

fn refine(
    config: &RunConfig,
    fno: FnoModel,
    mut field: VelocityField,
    corpora: &Corpora,
) -> Result<TrainedBundle, PipelineError> {
    let mut rng = task_rng(config.seed, "stage3");
    let (hier, diag) =
        run_stage3(config, &fno, &mut field, &corpora.target_train, None, &mut rng)?;
    Ok(TrainedBundle { fno: Some(fno), field, hierarchy: Some(hier), refine: Some(diag) })
}

/// The full method: pretrain, freeze the operator (optionally only its first
/// `k` spectral layers), train the guided field, refine under constraints.
pub struct FreezeVariant {
    /// `None` freezes everything after pretraining; `Some(k)` keeps the
    /// first `k` spectral layers frozen and trains the rest jointly with the
    /// field in stage two.
    pub frozen_layers: Option<usize>,
}

impl TrainingVariant for FreezeVariant {
    fn name(&self) -> String {
        match self.frozen_layers {
            None => "freeze".into(),
            Some(k) => format!("freeze-{k}"),
        }
    }

    fn run(
        &self,
        config: &RunConfig,
        corpora: &Corpora,
    ) -> Result<TrainedBundle, PipelineError> {
        let mut rng = task_rng(config.seed, "stage1");
        let (mut fno, _) = run_stage1(config, &corpora.pretrain, &mut rng)?;
        let mut rng = task_rng(config.seed, "stage2");
        let field = match self.frozen_layers {
            None => run_stage2(config, Some(&fno), &corpora.target_train, &mut rng)?.0,
            Some(k) => {
                fno.unfreeze();
                fno.freeze_first_layers(k);
                run_stage2_live(config, &mut fno, &corpora.target_train, &mut rng)?.0
            }
        };
        refine(config, fno, field, corpora)
    }
}

/// No pretraining: a randomly initialized operator trains jointly with the
/// field in stage two, then refinement proceeds as usual.
pub struct ScratchVariant;

impl TrainingVariant for ScratchVariant {
    fn name(&self) -> String {
        "scratch".into()
    }

    fn run(
        &self,
        config: &RunConfig,
        corpora: &Corpora,
    ) -> Result<TrainedBundle, PipelineError> {
        let mut rng = task_rng(config.seed, "stage2");
        let mut fno = FnoModel::new(config.fno, &mut rng);
        let field = run_stage2_live(config, &mut fno, &corpora.target_train, &mut rng)?.0;
        refine(config, fno, field, corpora)
    }
}

/// Pretrain, then let the whole operator keep training jointly with the
/// field in stage two instead of freezing it.
pub struct FinetuneVariant;

impl TrainingVariant for FinetuneVariant {
    fn name(&self) -> String {
        "finetune".into()
    }

    fn run(
        &self,
        config: &RunConfig,
        corpora: &Corpora,
    ) -> Result<TrainedBundle, PipelineError> {
        let mut rng = task_rng(config.seed, "stage1");
        let (mut fno, _) = run_stage1(config, &corpora.pretrain, &mut rng)?;
        fno.unfreeze();
        let mut rng = task_rng(config.seed, "stage2");
        let field = run_stage2_live(config, &mut fno, &corpora.target_train, &mut rng)?.0;
        refine(config, fno, field, corpora)
    }
}

/// Flow matching alone: no operator, no constraints — stages one and three
/// are skipped entirely.
pub struct PureCfmVariant;

impl TrainingVariant for PureCfmVariant {
    fn name(&self) -> String {
        "pure-cfm".into()
    }

    fn run(
        &self,
        config: &RunConfig,
        corpora: &Corpora,
    ) -> Result<TrainedBundle, PipelineError> {
        let mut rng = task_rng(config.seed, "stage2");
        let field = run_stage2(config, None, &corpora.target_train, &mut rng)?.0;
        Ok(TrainedBundle { fno: None, field, hierarchy: None, refine: None })
    }
}

// ── the comparison suite ──

/// One suite row: the recipe (closed set), the arm label distinguishing
/// config sweeps, its metrics, and hierarchy snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Canonical recipe name from the closed variant set.
    pub variant: String,
    /// Unique row label (adds the sweep arm, e.g. `freeze+clamp-0.5`).
    pub label: String,
    pub metrics: MetricsReport,
    /// Confounding-coefficient snapshot, natural `[level][lower]` layout.
    pub beta_kj: Option<Vec<Vec<f64>>>,
    /// Schedule-center snapshot.
    pub beta: Option<Vec<f64>>,
    pub wall_clock_s: f64,
}

/// Train one variant and evaluate it, labelling the result row (and its
/// artifact subdirectory) with `label`.
pub fn run_arm(
    config: &RunConfig,
    corpora: &Corpora,
    variant: &dyn TrainingVariant,
    label: &str,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, PipelineError> {
    let start = Instant::now();
    let bundle = variant.run(config, corpora)?;
    let arm_dir = out_dir.map(|d| d.join(label));
    let metrics =
        evaluate(config, &bundle.field, bundle.fno.as_ref(), &corpora.eval, arm_dir.as_deref())?;
    Ok(ExperimentResult {
        variant: variant.name(),
        label: label.into(),
        metrics,
        beta_kj: bundle.hierarchy.as_ref().map(|h| h.confound_matrix()),
        beta: bundle.hierarchy.as_ref().map(|h| h.beta.value.data.clone()),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Run the desk-scale comparison: the four recipes, the target-exclusion
/// study (pretraining with vs. without the target domain), and the
/// confounding-clamp sweep {0.5, 0.8} — all on shared seeds. Writes the
/// comparison table, the full results, and a wall-clock-free metrics file
/// (the determinism artifact) when `out_dir` is given.
pub fn run_experiment_suite(
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentResult>, PipelineError> {
    let corpora = build_corpora(config);
    let mut results = Vec::new();
    for variant in registry() {
        results.push(run_arm(config, &corpora, variant.as_ref(), &variant.name(), out_dir)?);
    }

    // target-exclusion study: the full method again, with the target domain
    // folded into pretraining (the excluded arm is the plain freeze row)
    let mut included = config.clone();
    included.data.pretrain_includes_target = true;
    let included_corpora = build_corpora(&included);
    results.push(run_arm(
        &included,
        &included_corpora,
        &FreezeVariant { frozen_layers: None },
        "freeze+target-included",
        out_dir,
    )?);

    // clamp sweep: 0.8 is the default already covered by the freeze row
    let mut clamped = config.clone();
    clamped.hierarchy.clamp_max = 0.5;
    results.push(run_arm(
        &clamped,
        &corpora,
        &FreezeVariant { frozen_layers: None },
        "freeze+clamp-0.5",
        out_dir,
    )?);

    if let Some(dir) = out_dir {
        let reports: BTreeMap<&str, &MetricsReport> =
            results.iter().map(|r| (r.label.as_str(), &r.metrics)).collect();
        write_text(
            &dir.join("metrics_reports.json"),
            &serde_json::to_string_pretty(&reports).expect("serializable reports"),
        )?;
        write_text(
            &dir.join("suite_results.json"),
            &serde_json::to_string_pretty(&results).expect("serializable results"),
        )?;
        write_text(&dir.join("comparison.txt"), &comparison_table(&results))?;
    }
    Ok(results)
}

/// Aligned plain-text comparison across suite rows.
pub fn comparison_table(results: &[ExperimentResult]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "arm".into(),
        "rmse-held-out".into(),
        "pfd".into(),
        "disc-acc".into(),
        "beta".into(),
    ]];
    for r in results {
        let beta = match &r.beta {
            Some(b) => format!(
                "[{}]",
                b.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
            ),
            None => "-".into(),
        };
        rows.push([
            r.label.clone(),
            format!("{:.6}", r.metrics.rmse_held_out_mean),
            format!("{:.6}", r.metrics.pfd_aggregate),
            format!("{:.4}", r.metrics.discrimination_accuracy),
            beta,
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> =
            row.iter().zip(widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

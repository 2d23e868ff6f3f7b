//! Library entry points behind the CLI commands.

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::datagen::{generate_dataset, DatasetMetadata, GraderPanel, SampleRecord, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::eval_report::{default_bucket_edges, evaluate, EvalReport, EvalSetup, Group};
use crate::seed::derive_seed;
use crate::streams::pipeline::{assemble, train_base, train_variant, Partitioned};
use crate::streams::{AblationLevel, StreamBundle};

/// Samples the grader panel and the dataset described by `cfg`.
pub fn simulate(cfg: &Config) -> Result<(Vec<SampleRecord>, DatasetMetadata)> {
    cfg.validate()?;
    let k = cfg.generator.num_classes;
    let panel = GraderPanel::sample(
        cfg.panel.graders,
        k,
        cfg.panel.skill_min,
        cfg.panel.skill_max,
        derive_seed(cfg.seed, "datagen.panel"),
    )?;
    let records = generate_dataset(&cfg.generator, &panel, cfg.n, cfg.seed)?;
    let meta = DatasetMetadata {
        format_version: DATASET_FORMAT_VERSION,
        seed: cfg.seed,
        n: cfg.n,
        generator: cfg.generator.clone(),
        panel,
    };
    Ok((records, meta))
}

pub fn eval_setup(cfg: &Config) -> EvalSetup {
    let k = cfg.generator.num_classes;
    let edges = if cfg.screening.bucket_edges.is_empty() {
        default_bucket_edges(k, cfg.screening.log_base)
    } else {
        cfg.screening.bucket_edges.clone()
    };
    EvalSetup {
        num_classes: k,
        referable: cfg.screening.referable.clone(),
        u_threshold: cfg.screening.u_threshold,
        log_base: cfg.screening.log_base,
        edges,
    }
}

/// The records of the test split; all records when the dataset has none.
pub fn test_records<'a>(records: &'a [SampleRecord], cfg: &Config) -> Vec<&'a SampleRecord> {
    let parts = Partitioned::new(records, cfg);
    if parts.test.is_empty() {
        log::warn!("dataset has no test split; evaluating on every record");
        return records.iter().collect();
    }
    parts.test
}

/// Runs the bundle on `records` and reports each requested group.
pub fn evaluate_bundle(
    bundle: &StreamBundle,
    records: &[&SampleRecord],
    setup: &EvalSetup,
    groups: &[Group],
) -> Result<Vec<EvalReport>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let decisions = bundle.infer_batch(&Tensor::from_rows(&rows)?)?;
    groups
        .iter()
        .map(|&g| evaluate(records, &decisions, g, setup))
        .collect()
}

/// Trains US and SC once, then one HC stream per level, evaluating each on
/// the test split. `on_result` sees every level as soon as it finishes, so
/// a later failure leaves earlier results with the caller.
pub fn run_ablation(
    records: &[SampleRecord],
    cfg: &Config,
    levels: &[AblationLevel],
    groups: &[Group],
    mut on_result: impl FnMut(AblationLevel, &[EvalReport]) -> Result<()>,
) -> Result<Vec<(AblationLevel, EvalReport)>> {
    let base = train_base(records, cfg)?;
    let test = test_records(records, cfg);
    let setup = eval_setup(cfg);
    let mut out = Vec::new();
    for &level in levels {
        let hc = train_variant(&base, level, cfg)?;
        let bundle = assemble(&base, hc.as_ref(), level, cfg);
        let reports = evaluate_bundle(&bundle, &test, &setup, groups)?;
        on_result(level, &reports)?;
        out.extend(reports.into_iter().map(|r| (level, r)));
    }
    Ok(out)
}

//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::autodiff::gradcheck::{self, GradcheckReport};
use crate::config::Config;
use crate::datagen::{
    metadata_path, read_dataset, read_metadata, summarize, write_atomic, write_dataset, write_metadata, SampleRecord,
};
use crate::error::{Error, Result};
use crate::eval_report::{
    self, ablation_csv, buckets_csv, report_csv, roc_csv, severity_csv, EvalReport, EvalSetup, Group,
};
use crate::experiment::{evaluate_bundle, run_ablation, simulate, test_records};
use crate::seed::derive_seed;
use crate::streams::pipeline::train_pipeline;
use crate::streams::{log_to_csv, sha256_file, AblationLevel, StreamBundle};

#[derive(Debug, Parser)]
#[command(
    name = "uncscreen",
    version,
    about = "Uncertainty-guided multi-stream screening on synthetic multi-grader data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Whole,
    Hard,
    Both,
}

impl GroupArg {
    fn groups(self) -> Vec<Group> {
        match self {
            GroupArg::Whole => vec![Group::WholeSet],
            GroupArg::Hard => vec![Group::HardOnly],
            GroupArg::Both => vec![Group::WholeSet, Group::HardOnly],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    M1,
    M2,
    M3,
    M4,
    All,
}

impl VariantArg {
    fn levels(self) -> Vec<AblationLevel> {
        match self {
            VariantArg::M1 => vec![AblationLevel::M1],
            VariantArg::M2 => vec![AblationLevel::M2],
            VariantArg::M3 => vec![AblationLevel::M3],
            VariantArg::M4 => vec![AblationLevel::M4],
            VariantArg::All => AblationLevel::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-grader dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file to write (JSON lines); metadata goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train US-Net, SC-Net and HC-Net and write a bundle.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bundle directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Hard-case objective; defaults to the configured variant.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Evaluate a bundle on the test split of a dataset.
    Eval {
        bundle: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        group: GroupArg,
    },
    /// Train and evaluate the M1 to M4 variants on shared streams and splits.
    Ablate {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "both")]
        group: GroupArg,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Optional directory for `gradcheck.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UnknownConfigKeys(_) | Error::Config { .. } => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance of one command run. Carries wall-clock timings, so unlike the
/// other outputs it differs between otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub stages: Vec<StageTiming>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    fn new(command: &str, cfg: &Config) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.to_text(),
                seeds: BTreeMap::from([("master".to_string(), cfg.seed)]),
                inputs: Vec::new(),
                outputs: Vec::new(),
                stages: Vec::new(),
            },
            clock: Instant::now(),
        }
    }

    fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: (now - self.clock).as_secs_f64(),
        });
        self.clock = now;
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    fn hash(path: &Path) -> Result<ArtifactHash> {
        Ok(ArtifactHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = Self::hash(path)?;
        self.manifest.inputs.push(h);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let h = Self::hash(path)?;
        self.manifest.outputs.push(h);
        Ok(())
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        write_atomic(path, text.as_bytes())?;
        self.output(path)
    }

    fn finish(self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(path, json.as_bytes())
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>, n: Option<usize>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = n {
        cfg.n = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a dataset, taking K from its metadata when present.
pub fn load_dataset(path: &Path, cfg: &Config) -> Result<Vec<SampleRecord>> {
    let k = cfg.generator.num_classes;
    if let Some(meta) = read_metadata(path)? {
        if meta.generator.num_classes != k {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes but the configuration has {k}",
                meta.generator.num_classes
            )));
        }
    }
    read_dataset(path, k)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_simulate(config: Option<&Path>, out: &Path, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed, n)?;
    let mut run = Run::new("simulate", &cfg);
    run.seed("datagen.panel", derive_seed(cfg.seed, "datagen.panel"));
    let (records, meta) = simulate(&cfg)?;
    run.stage("generate");
    write_dataset(&records, out)?;
    write_metadata(out, &meta)?;
    run.output(out)?;
    run.output(&metadata_path(out))?;
    run.stage("write");

    let k = cfg.generator.num_classes;
    let s = summarize(&records, k, cfg.screening.u_threshold * cfg.screening.log_base.ln());
    println!("samples: {}", s.n);
    for c in 0..k {
        let mean = s.mean_u_by_class[c].map_or("NA".to_string(), |m| format!("{m:.6}"));
        println!("class {c}: count {} mean_u {mean}", s.class_counts[c]);
    }
    println!("hard fraction: {:.6}", s.hard_fraction);
    println!(
        "splits: train {} val {} test {}",
        s.split_counts[0], s.split_counts[1], s.split_counts[2]
    );
    run.finish(&sibling(out, ".run_manifest.json"))
}

pub fn cmd_train(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    variant: Option<AblationLevel>,
) -> Result<StreamBundle> {
    let cfg = load_config(config, seed, None)?;
    let level = variant.unwrap_or(cfg.variant);
    let mut run = Run::new("train", &cfg);
    for s in ["stream.us", "stream.sc", "stream.hc"] {
        run.seed(s, derive_seed(cfg.seed, s));
    }
    let records = load_dataset(dataset, &cfg)?;
    run.input(dataset)?;
    run.stage("load");

    let trained = train_pipeline(&records, &cfg, level)?;
    run.stage("train");
    create_dir(out)?;
    let manifest = trained.bundle.save(out)?;
    for w in &manifest.weights {
        run.output(&out.join(&w.file))?;
    }
    run.output(&out.join(crate::streams::BUNDLE_MANIFEST))?;
    run.write_text(&out.join("us_log.csv"), &log_to_csv(&trained.base.us.log))?;
    run.write_text(&out.join("sc_log.csv"), &log_to_csv(&trained.base.sc.log))?;
    if let Some(hc) = &trained.hc {
        run.write_text(&out.join("hc_log.csv"), &log_to_csv(&hc.log))?;
    }
    run.write_text(&out.join("config.txt"), &cfg.to_text())?;
    run.stage("write");

    println!("US-Net best epoch {}", trained.base.us.best_epoch);
    println!("SC-Net best epoch {}", trained.base.sc.best_epoch);
    match &trained.hc {
        Some(hc) => println!("HC-Net ({level}) best epoch {}", hc.best_epoch),
        None => println!("HC-Net skipped: no hard training cases; bundle is SC-only"),
    }
    run.finish(&out.join(RUN_MANIFEST))?;
    Ok(trained.bundle)
}

fn write_reports(run: &mut Run, out: &Path, reports: &[EvalReport]) -> Result<()> {
    run.write_text(&out.join("report.csv"), &report_csv(reports))?;
    run.write_text(&out.join("buckets.csv"), &buckets_csv(reports))?;
    run.write_text(&out.join("severity_uncertainty.csv"), &severity_csv(reports))?;
    run.write_text(&out.join("roc.csv"), &roc_csv(reports))
}

fn print_reports(reports: &[EvalReport]) {
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for r in reports {
        println!(
            "{:<5} n {:>5}  accuracy {}  SE {}  SP {}  AUC {}",
            r.group.name(),
            r.n,
            f(r.accuracy),
            f(r.sensitivity),
            f(r.specificity),
            f(r.auc)
        );
    }
}

pub fn cmd_eval(
    bundle_dir: &Path,
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    groups: &[Group],
) -> Result<Vec<EvalReport>> {
    let cfg = load_config(config, None, None)?;
    let mut run = Run::new("eval", &cfg);
    let bundle = StreamBundle::load(bundle_dir)?;
    run.input(&bundle_dir.join(crate::streams::BUNDLE_MANIFEST))?;
    let records = load_dataset(dataset, &cfg)?;
    run.input(dataset)?;
    run.stage("load");

    let edges = if cfg.screening.bucket_edges.is_empty() {
        eval_report::default_bucket_edges(bundle.num_classes, bundle.log_base)
    } else {
        cfg.screening.bucket_edges.clone()
    };
    let setup = EvalSetup {
        num_classes: bundle.num_classes,
        referable: bundle.referable.clone(),
        u_threshold: bundle.u_threshold,
        log_base: bundle.log_base,
        edges,
    };
    let test = test_records(&records, &cfg);
    let reports = evaluate_bundle(&bundle, &test, &setup, groups)?;
    run.stage("evaluate");
    create_dir(out)?;
    write_reports(&mut run, out, &reports)?;
    print_reports(&reports);
    run.finish(&out.join(RUN_MANIFEST))?;
    Ok(reports)
}

pub fn cmd_ablate(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    levels: &[AblationLevel],
    groups: &[Group],
) -> Result<Vec<eval_report::AblationTable>> {
    let cfg = load_config(config, seed, None)?;
    let mut run = Run::new("ablate", &cfg);
    for s in ["stream.us", "stream.sc", "stream.hc"] {
        run.seed(s, derive_seed(cfg.seed, s));
    }
    let records = load_dataset(dataset, &cfg)?;
    run.input(dataset)?;
    run.stage("load");
    create_dir(out)?;

    let mut written = Vec::new();
    let result = run_ablation(&records, &cfg, levels, groups, |level, reports| {
        let path = out.join(format!("report_{}.csv", level.name()));
        write_atomic(&path, report_csv(reports).as_bytes())?;
        written.push(path);
        log::info!("variant {level} finished");
        Ok(())
    });
    for p in &written {
        run.output(p)?;
    }
    let results = match result {
        Ok(r) => r,
        Err(e) => {
            log::error!("ablation aborted; completed variants are kept in {}", out.display());
            run.stage("ablate (aborted)");
            run.finish(&out.join(RUN_MANIFEST))?;
            return Err(e);
        }
    };
    run.stage("ablate");
    let tables = groups
        .iter()
        .map(|&g| eval_report::ablation_table(&results, g, levels))
        .collect::<Result<Vec<_>>>()?;
    run.write_text(&out.join("ablation.csv"), &ablation_csv(&tables))?;
    for t in &tables {
        println!("{} cases", t.group.name());
        for row in &t.rows {
            let f1: Vec<String> = row.f1.iter().map(|f| format!("{f:.4}")).collect();
            let overall = row.overall.map_or("NA".to_string(), |x| format!("{x:.4}"));
            println!("  {}  F1 [{}]  overall {overall}", row.level, f1.join(", "));
        }
    }
    run.finish(&out.join(RUN_MANIFEST))?;
    Ok(tables)
}

/// Number of independent seeds the gradient check runs.
pub const GRADCHECK_SEEDS: u64 = 5;

pub fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Vec<GradcheckReport>> {
    let cfg = load_config(config, seed, None)?;
    let tol = gradcheck::DEFAULT_TOLERANCE;
    let mut worst: BTreeMap<&'static str, GradcheckReport> = BTreeMap::new();
    let mut order = Vec::new();
    for i in 0..GRADCHECK_SEEDS {
        let s = derive_seed(cfg.seed, &format!("gradcheck.{i}"));
        for rep in gradcheck::run_suite(s, &cfg.hyperparams, gradcheck::DEFAULT_STEP)? {
            let name = rep.loss.name();
            if !worst.contains_key(name) {
                order.push(name);
            }
            let replace = worst.get(name).is_none_or(|w| rep.max_rel_error > w.max_rel_error);
            if replace {
                worst.insert(name, rep);
            }
        }
    }
    let reports: Vec<GradcheckReport> = order.iter().map(|n| worst[n].clone()).collect();
    let mut csv = String::from("loss,max_rel_error,checked,pass\n");
    println!("{:<14} {:>14} {:>8}  result", "loss", "max rel error", "checked");
    for r in &reports {
        let pass = r.passed(tol);
        println!(
            "{:<14} {:>14.3e} {:>8}  {}",
            r.loss.name(),
            r.max_rel_error,
            r.checked,
            if pass { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{:.6e},{},{}\n",
            r.loss.name(),
            r.max_rel_error,
            r.checked,
            pass
        ));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_atomic(&dir.join("gradcheck.csv"), csv.as_bytes())?;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed(tol))
        .map(|r| r.loss.name())
        .collect();
    if !failed.is_empty() {
        return Err(Error::Numerical(format!(
            "gradient check failed for {} (tolerance {tol:e})",
            failed.join(", ")
        )));
    }
    Ok(reports)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, n, seed } => cmd_simulate(config.as_deref(), &out, n, seed),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            variant,
        } => {
            let level = match variant {
                None => None,
                Some(VariantArg::All) => {
                    return Err(Error::config("variant", "train takes a single variant"));
                }
                Some(v) => Some(v.levels()[0]),
            };
            cmd_train(&dataset, config.as_deref(), &out, seed, level).map(|_| ())
        }
        Command::Eval {
            bundle,
            dataset,
            config,
            out,
            group,
        } => cmd_eval(&bundle, &dataset, config.as_deref(), &out, &group.groups()).map(|_| ()),
        Command::Ablate {
            dataset,
            config,
            out,
            seed,
            variant,
            group,
        } => cmd_ablate(
            &dataset,
            config.as_deref(),
            &out,
            seed,
            &variant.levels(),
            &group.groups(),
        )
        .map(|_| ()),
        Command::Gradcheck { config, seed, out } => cmd_gradcheck(config.as_deref(), seed, out.as_deref()).map(|_| ()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::UnknownConfigKeys(vec!["x".into()])), 1);
        assert_eq!(exit_code(&Error::config("epochs", "bad")), 1);
        assert_eq!(exit_code(&Error::EmptyDataset("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("a".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("nan".into())), 3);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["uncscreen", "frobnicate"]), 1);
        assert_eq!(
            run(["uncscreen", "eval", "--group", "sideways", "a", "b", "--out", "c"]),
            1
        );
        assert_eq!(run(["uncscreen", "--help"]), 0);
    }

    #[test]
    fn group_and_variant_flags_expand() {
        assert_eq!(GroupArg::Both.groups(), vec![Group::WholeSet, Group::HardOnly]);
        assert_eq!(VariantArg::All.levels().len(), 4);
        assert_eq!(VariantArg::M3.levels(), vec![AblationLevel::M3]);
    }
}

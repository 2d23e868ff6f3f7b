//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are rejected all at once so a typo never silently falls back to a
//! default. List values are comma separated.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::GeneratorSpec;
use crate::error::{Error, Result};
use crate::label_model::{check_log_base, DEFAULT_PARTITION_THRESHOLD};
use crate::losses::{Hyperparams, UfdSign};
use crate::streams::{AblationLevel, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelConfig {
    pub graders: usize,
    pub skill_min: f64,
    pub skill_max: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            graders: 21,
            skill_min: 0.9,
            skill_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningConfig {
    /// Simple/hard cut-off, in units of `log_base`.
    pub u_threshold: f64,
    pub log_base: f64,
    /// `referable[k]` is true when class `k` should be referred.
    pub referable: Vec<bool>,
    /// Uncertainty bucket edges for the report tables; empty means default.
    pub bucket_edges: Vec<f64>,
}

impl ScreeningConfig {
    pub fn default_for(num_classes: usize) -> Self {
        let mut referable = vec![true; num_classes];
        if let Some(first) = referable.first_mut() {
            *first = false;
        }
        Self {
            u_threshold: DEFAULT_PARTITION_THRESHOLD,
            log_base: std::f64::consts::E,
            referable,
            bucket_edges: Vec::new(),
        }
    }

    /// Converts an entropy in nats into the configured base.
    pub fn to_units(&self, nats: f64) -> f64 {
        nats / self.log_base.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub n: usize,
    pub generator: GeneratorSpec,
    pub panel: PanelConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub hyperparams: Hyperparams,
    pub screening: ScreeningConfig,
    /// Hard-case objective used by `train`.
    pub variant: AblationLevel,
}

impl Default for Config {
    fn default() -> Self {
        let generator = GeneratorSpec::default();
        let k = generator.num_classes;
        Self {
            seed: 7,
            n: 5000,
            generator,
            panel: PanelConfig::default(),
            hidden: vec![64, 32],
            train: TrainConfig::default(),
            hyperparams: Hyperparams::default(),
            screening: ScreeningConfig::default_for(k),
            variant: AblationLevel::M4,
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "n",
    "num_classes",
    "feature_dim",
    "class_weights",
    "severity_centers",
    "severity_spread",
    "class_ambiguity",
    "boundary_ambiguity",
    "boundary_width",
    "nuisance_ambiguity",
    "ambiguity_scale",
    "severity_gain",
    "nuisance_gain",
    "feature_noise",
    "quality_attenuation",
    "quality_rotation",
    "split_train",
    "split_val",
    "split_test",
    "graders",
    "grader_skill_min",
    "grader_skill_max",
    "hidden",
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "decay_factor",
    "decay_patience",
    "decay_min_delta",
    "early_stop",
    "early_stop_patience",
    "gamma",
    "alpha",
    "beta",
    "ufd_weight",
    "ufd_sign",
    "u_threshold",
    "log_base",
    "referable_classes",
    "bucket_edges",
    "variant",
];

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{raw}`"))),
    }
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    fn entries(text: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", i + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "duplicate key"));
            }
        }
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let k = self.generator.num_classes;
        if self.panel.graders < crate::datagen::CONSENSUS_VOTES {
            return Err(Error::config("graders", "need at least 3 graders"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive hidden width"));
        }
        if self.hidden.last() < Some(&2) {
            return Err(Error::config("hidden", "last hidden layer needs width >= 2"));
        }
        self.train.validate()?;
        self.hyperparams.validate()?;
        check_log_base(self.screening.log_base).map_err(|e| Error::config("log_base", e.to_string()))?;
        if !(self.screening.u_threshold >= 0.0) {
            return Err(Error::config("u_threshold", "must be nonnegative"));
        }
        if self.screening.referable.len() != k {
            return Err(Error::config(
                "referable_classes",
                "referable map must cover every class",
            ));
        }
        if self.screening.referable.iter().all(|&r| r) {
            return Err(Error::config(
                "referable_classes",
                "at least one class must be non-referable",
            ));
        }
        let e = &self.screening.bucket_edges;
        if !e.is_empty() && (e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1])) {
            return Err(Error::config("bucket_edges", "edges must be strictly increasing"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces the configuration.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let hp = &self.hyperparams;
        let s = &self.screening;
        let referable: Vec<usize> = s
            .referable
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect();
        let lines = [
            ("seed", self.seed.to_string()),
            ("n", self.n.to_string()),
            ("num_classes", g.num_classes.to_string()),
            ("feature_dim", g.feature_dim.to_string()),
            ("class_weights", fmt_list(&g.class_weights)),
            ("severity_centers", fmt_list(&g.severity_centers)),
            ("severity_spread", fmt_list(&g.severity_spread)),
            ("class_ambiguity", fmt_list(&g.class_ambiguity)),
            ("boundary_ambiguity", g.boundary_ambiguity.to_string()),
            ("boundary_width", g.boundary_width.to_string()),
            ("nuisance_ambiguity", g.nuisance_ambiguity.to_string()),
            ("ambiguity_scale", g.ambiguity_scale.to_string()),
            ("severity_gain", g.severity_gain.to_string()),
            ("nuisance_gain", g.nuisance_gain.to_string()),
            ("feature_noise", g.feature_noise.to_string()),
            ("quality_attenuation", g.quality_attenuation.to_string()),
            ("quality_rotation", g.quality_rotation.to_string()),
            ("split_train", g.split_fractions[0].to_string()),
            ("split_val", g.split_fractions[1].to_string()),
            ("split_test", g.split_fractions[2].to_string()),
            ("graders", self.panel.graders.to_string()),
            ("grader_skill_min", self.panel.skill_min.to_string()),
            ("grader_skill_max", self.panel.skill_max.to_string()),
            ("hidden", fmt_list(&self.hidden)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_epsilon", t.adam.epsilon.to_string()),
            ("decay_factor", t.adam.decay_factor.to_string()),
            ("decay_patience", t.adam.decay_patience.to_string()),
            ("decay_min_delta", t.adam.decay_min_delta.to_string()),
            ("early_stop", t.early_stop.to_string()),
            ("early_stop_patience", t.early_stop_patience.to_string()),
            ("gamma", hp.gamma.to_string()),
            ("alpha", hp.alpha.to_string()),
            ("beta", hp.beta.to_string()),
            ("ufd_weight", hp.ufd_weight.to_string()),
            (
                "ufd_sign",
                match hp.ufd_sign {
                    UfdSign::Hinge => "hinge".into(),
                    UfdSign::Printed => "printed".into(),
                },
            ),
            ("u_threshold", s.u_threshold.to_string()),
            ("log_base", s.log_base.to_string()),
            ("referable_classes", fmt_list(&referable)),
            ("bucket_edges", fmt_list(&s.bucket_edges)),
            ("variant", self.variant.name().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let map = Config::entries(text)?;
        let mut cfg = Config::default();
        let get = |k: &str| map.get(k).map(String::as_str);

        if let Some(v) = get("num_classes") {
            let k: usize = parse("num_classes", v)?;
            if k < 2 {
                return Err(Error::config("num_classes", "need at least two classes"));
            }
            if k != cfg.generator.num_classes {
                // Per-class vectors must then be given explicitly or are
                // rebuilt with neutral values.
                let g = &mut cfg.generator;
                g.num_classes = k;
                g.class_weights = vec![1.0 / k as f64; k];
                g.severity_centers = (0..k).map(|i| 2.0 * i as f64 - (k - 1) as f64).collect();
                g.severity_spread = vec![0.7; k];
                g.class_ambiguity = vec![0.05; k];
                cfg.screening = ScreeningConfig::default_for(k);
            }
        }
        let g = &mut cfg.generator;
        macro_rules! set {
            ($key:literal, $target:expr) => {
                if let Some(v) = get($key) {
                    $target = parse($key, v)?;
                }
            };
        }
        macro_rules! set_list {
            ($key:literal, $target:expr) => {
                if let Some(v) = get($key) {
                    $target = parse_list($key, v)?;
                }
            };
        }
        set!("seed", cfg.seed);
        set!("n", cfg.n);
        set!("feature_dim", g.feature_dim);
        set_list!("class_weights", g.class_weights);
        set_list!("severity_centers", g.severity_centers);
        set_list!("severity_spread", g.severity_spread);
        set_list!("class_ambiguity", g.class_ambiguity);
        set!("boundary_ambiguity", g.boundary_ambiguity);
        set!("boundary_width", g.boundary_width);
        set!("nuisance_ambiguity", g.nuisance_ambiguity);
        set!("ambiguity_scale", g.ambiguity_scale);
        set!("severity_gain", g.severity_gain);
        set!("nuisance_gain", g.nuisance_gain);
        set!("feature_noise", g.feature_noise);
        set!("quality_attenuation", g.quality_attenuation);
        set!("quality_rotation", g.quality_rotation);
        set!("split_train", g.split_fractions[0]);
        set!("split_val", g.split_fractions[1]);
        set!("split_test", g.split_fractions[2]);
        set!("graders", cfg.panel.graders);
        set!("grader_skill_min", cfg.panel.skill_min);
        set!("grader_skill_max", cfg.panel.skill_max);
        set_list!("hidden", cfg.hidden);
        let t = &mut cfg.train;
        set!("epochs", t.epochs);
        set!("batch_size", t.batch_size);
        set!("lr", t.adam.lr);
        set!("adam_beta1", t.adam.beta1);
        set!("adam_beta2", t.adam.beta2);
        set!("adam_epsilon", t.adam.epsilon);
        set!("decay_factor", t.adam.decay_factor);
        set!("decay_patience", t.adam.decay_patience);
        set!("decay_min_delta", t.adam.decay_min_delta);
        if let Some(v) = get("early_stop") {
            t.early_stop = parse_bool("early_stop", v)?;
        }
        set!("early_stop_patience", t.early_stop_patience);
        let hp = &mut cfg.hyperparams;
        set!("gamma", hp.gamma);
        set!("alpha", hp.alpha);
        set!("beta", hp.beta);
        set!("ufd_weight", hp.ufd_weight);
        if let Some(v) = get("ufd_sign") {
            hp.ufd_sign = match v {
                "hinge" => UfdSign::Hinge,
                "printed" => UfdSign::Printed,
                other => {
                    return Err(Error::config(
                        "ufd_sign",
                        format!("expected hinge|printed, got `{other}`"),
                    ))
                }
            };
        }
        let s = &mut cfg.screening;
        set!("u_threshold", s.u_threshold);
        if let Some(v) = get("log_base") {
            s.log_base = if v == "e" {
                std::f64::consts::E
            } else {
                parse("log_base", v)?
            };
        }
        if let Some(v) = get("referable_classes") {
            let classes: Vec<usize> = parse_list("referable_classes", v)?;
            let k = cfg.generator.num_classes;
            if let Some(bad) = classes.iter().find(|&&c| c >= k) {
                return Err(Error::config("referable_classes", format!("class {bad} out of range")));
            }
            s.referable = (0..k).map(|c| classes.contains(&c)).collect();
        }
        set_list!("bucket_edges", s.bucket_edges);
        if let Some(v) = get("variant") {
            cfg.variant = v.parse().map_err(|e: Error| Error::config("variant", e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

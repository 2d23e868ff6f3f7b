//! Synthetic multi-grader screening data.
//!
//! Each sample has a latent severity on a line with one centre per class.
//! Its ambiguity grows near class boundaries, carries a class-specific base
//! level, and includes a visible "quality" nuisance term. Graders from a
//! heterogeneous panel are consulted one at a time until some class has
//! collected [`CONSENSUS_VOTES`] votes.
//!
//! Records are stored as JSON lines with a sidecar metadata document.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_model::{
    empirical_distribution, majority_label, uncertainty_score, EmpiricalDistribution, GraderVotes, UncertaintyScore,
};
use crate::seed::derive_seed;

/// Number of agreeing votes that ends grading of one sample.
pub const CONSENSUS_VOTES: usize = 3;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grader {
    /// Probability mass kept on the true class before ambiguity is applied.
    pub skill: f64,
    /// Class this grader drifts toward when wrong.
    pub bias_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderPanel {
    pub num_classes: usize,
    pub graders: Vec<Grader>,
}

impl GraderPanel {
    /// Panel with skills uniform in `[skill_min, skill_max]` and random bias classes.
    pub fn sample(num_graders: usize, num_classes: usize, skill_min: f64, skill_max: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&skill_min) || !(skill_min..=1.0).contains(&skill_max) {
            return Err(Error::InvalidArgument(format!(
                "grader skill range [{skill_min}, {skill_max}] must lie in [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graders = (0..num_graders)
            .map(|_| Grader {
                skill: if skill_max > skill_min {
                    rng.random_range(skill_min..=skill_max)
                } else {
                    skill_min
                },
                bias_class: rng.random_range(0..num_classes.max(1)),
            })
            .collect();
        let panel = Self { num_classes, graders };
        panel.validate()?;
        Ok(panel)
    }

    /// Every grader always reports the true class of an unambiguous sample.
    pub fn perfect(num_graders: usize, num_classes: usize) -> Result<Self> {
        let panel = Self {
            num_classes,
            graders: vec![
                Grader {
                    skill: 1.0,
                    bias_class: 0
                };
                num_graders
            ],
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graders.len() < CONSENSUS_VOTES {
            return Err(Error::InvalidArgument(format!(
                "panel needs at least {CONSENSUS_VOTES} graders, has {}",
                self.graders.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("panel needs at least two classes".into()));
        }
        for (i, g) in self.graders.iter().enumerate() {
            if !(0.0..=1.0).contains(&g.skill) || g.bias_class >= self.num_classes {
                return Err(Error::InvalidArgument(format!("grader {i} is invalid: {g:?}")));
            }
        }
        Ok(())
    }

    /// Row `true_class` of grader `g`'s confusion matrix:
    /// `skill * e_true + (1 - skill) * (e_bias + uniform) / 2`.
    pub fn confusion_row(&self, g: usize, true_class: usize) -> Vec<f64> {
        let k = self.num_classes;
        let grader = self.graders[g];
        let slip = 1.0 - grader.skill;
        let mut row = vec![0.5 * slip / k as f64; k];
        row[true_class] += grader.skill;
        row[grader.bias_class] += 0.5 * slip;
        row
    }

    /// Vote distribution of grader `g`, pulled toward uniform by `ambiguity`.
    pub fn vote_distribution(&self, g: usize, true_class: usize, ambiguity: f64) -> Vec<f64> {
        let k = self.num_classes as f64;
        self.confusion_row(g, true_class)
            .into_iter()
            .map(|p| (1.0 - ambiguity) * p + ambiguity / k)
            .collect()
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Consults graders in random order, without replacement, until one class
/// holds [`CONSENSUS_VOTES`] votes or the panel is exhausted.
pub fn simulate_votes(
    panel: &GraderPanel,
    sample_id: &str,
    true_class: usize,
    ambiguity: f64,
    rng: &mut impl Rng,
) -> Result<GraderVotes> {
    panel.validate()?;
    if true_class >= panel.num_classes {
        return Err(Error::InvalidArgument(format!("true class {true_class} out of range")));
    }
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(Error::InvalidArgument(format!("ambiguity {ambiguity} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..panel.graders.len()).collect();
    order.shuffle(rng);
    let mut counts = vec![0usize; panel.num_classes];
    let mut votes = Vec::new();
    for g in order {
        let v = sample_categorical(rng, &panel.vote_distribution(g, true_class, ambiguity));
        votes.push(v);
        counts[v] += 1;
        if counts[v] == CONSENSUS_VOTES {
            break;
        }
    }
    GraderVotes::new(sample_id, votes, panel.num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub true_class: usize,
    pub votes: GraderVotes,
    pub empirical: EmpiricalDistribution,
    pub u: UncertaintyScore,
    pub split: Split,
}

impl SampleRecord {
    pub fn new(id: String, features: Vec<f64>, true_class: usize, votes: GraderVotes, split: Split) -> Self {
        let empirical = empirical_distribution(&votes);
        let u = uncertainty_score(&empirical);
        Self {
            id,
            features,
            true_class,
            votes,
            empirical,
            u,
            split,
        }
    }

    /// Majority-vote annotation, the reference label for training and scoring.
    pub fn label(&self) -> usize {
        majority_label(&self.votes).class_index
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Class prior; skewed toward class 0.
    pub class_weights: Vec<f64>,
    /// Latent severity centre per class (increasing).
    pub severity_centers: Vec<f64>,
    pub severity_spread: Vec<f64>,
    /// Ambiguity every sample of a class starts with.
    pub class_ambiguity: Vec<f64>,
    /// Peak extra ambiguity on a class boundary.
    pub boundary_ambiguity: f64,
    /// Width of the boundary bump in severity units.
    pub boundary_width: f64,
    /// Upper end of the per-sample visible quality nuisance.
    pub nuisance_ambiguity: f64,
    /// Global multiplier on the ambiguity field; 0 disables it.
    pub ambiguity_scale: f64,
    /// Feature-space gain of the latent severity.
    pub severity_gain: f64,
    /// Feature-space gain of the quality nuisance.
    pub nuisance_gain: f64,
    pub feature_noise: f64,
    /// Fraction of the severity signal lost at the worst quality.
    pub quality_attenuation: f64,
    /// Angle (radians) by which the severity axis turns at the worst quality.
    pub quality_rotation: f64,
    pub split_fractions: [f64; 3],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            feature_dim: 16,
            class_weights: vec![0.65, 0.15, 0.20],
            severity_centers: vec![-2.0, 0.0, 2.0],
            severity_spread: vec![0.7, 0.5, 0.7],
            class_ambiguity: vec![0.02, 0.25, 0.06],
            boundary_ambiguity: 0.35,
            boundary_width: 0.4,
            nuisance_ambiguity: 0.15,
            ambiguity_scale: 1.0,
            severity_gain: 1.0,
            nuisance_gain: 4.0,
            feature_noise: 0.6,
            quality_attenuation: 0.5,
            quality_rotation: 1.2,
            split_fractions: [0.7, 0.15, 0.15],
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        let bad = |msg: String| Err(Error::InvalidArgument(format!("generator spec: {msg}")));
        if k < 2 {
            return bad("need at least two classes".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        for (name, len) in [
            ("class_weights", self.class_weights.len()),
            ("severity_centers", self.severity_centers.len()),
            ("severity_spread", self.severity_spread.len()),
            ("class_ambiguity", self.class_ambiguity.len()),
        ] {
            if len != k {
                return bad(format!("{name} has {len} entries for {k} classes"));
            }
        }
        let wsum: f64 = self.class_weights.iter().sum();
        if self.class_weights.iter().any(|w| *w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
            return bad(format!("class weights must be nonnegative and sum to 1 (sum {wsum})"));
        }
        if self.severity_centers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("severity centres must be strictly increasing".into());
        }
        if self.severity_spread.iter().any(|s| !(*s > 0.0)) {
            return bad("severity spreads must be positive".into());
        }
        if self.class_ambiguity.iter().any(|a| !(0.0..=1.0).contains(a))
            || !(0.0..=1.0).contains(&self.boundary_ambiguity)
            || !(0.0..=1.0).contains(&self.nuisance_ambiguity)
            || self.ambiguity_scale < 0.0
        {
            return bad("ambiguity parameters must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.quality_attenuation) || !self.quality_rotation.is_finite() {
            return bad("quality attenuation must lie in [0, 1] and rotation be finite".into());
        }
        if !(self.boundary_width > 0.0) || self.feature_noise < 0.0 {
            return bad("boundary width must be positive and noise nonnegative".into());
        }
        let fsum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (fsum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be nonnegative and sum to 1 (sum {fsum})"));
        }
        Ok(())
    }

    fn boundaries(&self) -> Vec<f64> {
        self.severity_centers.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Ambiguity of a sample with latent severity `z`, class `c`, and nuisance `q`.
    pub fn ambiguity(&self, z: f64, class: usize, nuisance: f64) -> f64 {
        let d = self
            .boundaries()
            .iter()
            .map(|b| (z - b).abs())
            .fold(f64::INFINITY, f64::min);
        let bump = self.boundary_ambiguity * (-(d / self.boundary_width).powi(2)).exp();
        (self.ambiguity_scale * (self.class_ambiguity[class] + bump + nuisance)).clamp(0.0, 1.0)
    }
}

/// Split sizes `(train, val, test)` for `n` samples.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let train = ((n as f64) * fractions[0]).round() as usize;
    let val = (((n as f64) * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

fn unit_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn generate_dataset(spec: &GeneratorSpec, panel: &GraderPanel, n: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    panel.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if panel.num_classes != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "panel grades {} classes, spec has {}",
            panel.num_classes, spec.num_classes
        )));
    }
    let mut geo_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "datagen.geometry"));
    let severity_dir = unit_direction(&mut geo_rng, spec.feature_dim);
    let nuisance_dir = unit_direction(&mut geo_rng, spec.feature_dim);
    // Fixed quadratic read-out so that classes are not linearly trivial.
    let curve_dir = unit_direction(&mut geo_rng, spec.feature_dim);
    // Poor quality turns the severity axis toward this one.
    let distractor_dir = unit_direction(&mut geo_rng, spec.feature_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "datagen.samples"));
    let mut vote_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "datagen.votes"));
    let noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).expect("finite noise");

    let (n_train, n_val, _) = split_sizes(n, spec.split_fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "datagen.split")));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let width = (n as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let class = sample_categorical(&mut rng, &spec.class_weights);
        let z = spec.severity_centers[class]
            + spec.severity_spread[class] * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        let q: f64 = rng.random_range(0.0..=1.0);
        let nuisance = q * spec.nuisance_ambiguity;
        let ambiguity = spec.ambiguity(z, class, nuisance);
        let gain = spec.severity_gain * (1.0 - spec.quality_attenuation * q);
        let (sin, cos) = (spec.quality_rotation * q).sin_cos();
        let features: Vec<f64> = (0..spec.feature_dim)
            .map(|j| {
                let f = gain * z * (cos * severity_dir[j] + sin * distractor_dir[j])
                    + spec.nuisance_gain * nuisance * nuisance_dir[j]
                    + 0.25 * z * z * curve_dir[j];
                let e = if spec.feature_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                f + e
            })
            .collect();
        let id = format!("s{:0width$}", i, width = width);
        let votes = simulate_votes(panel, &id, class, ambiguity, &mut vote_rng)?;
        records.push(SampleRecord::new(id, features, class, votes, split));
    }
    Ok(records)
}

/// One JSON line of a dataset file.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    features: Vec<f64>,
    true_class: usize,
    votes: Vec<usize>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empirical: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<f64>,
}

pub fn write_dataset(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            features: r.features.clone(),
            true_class: r.true_class,
            votes: r.votes.votes().to_vec(),
            split: r.split,
            empirical: Some(r.empirical.probs().to_vec()),
            u: Some(r.u.value()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset; derived fields are always recomputed and
/// compared against stored values.
pub fn read_dataset(path: &Path, num_classes: usize) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut width = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let votes =
            GraderVotes::new(raw.id.clone(), raw.votes, num_classes).map_err(|e| parse_err(lineno, e.to_string()))?;
        if raw.true_class >= num_classes {
            return Err(parse_err(
                lineno,
                format!("sample `{}`: true_class {} out of range", raw.id, raw.true_class),
            ));
        }
        match width {
            None => width = Some(raw.features.len()),
            Some(w) if w != raw.features.len() => {
                return Err(parse_err(
                    lineno,
                    format!("sample `{}`: {} features, expected {w}", raw.id, raw.features.len()),
                ))
            }
            _ => {}
        }
        if raw.features.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, format!("sample `{}`: non-finite feature", raw.id)));
        }
        let rec = SampleRecord::new(raw.id, raw.features, raw.true_class, votes, raw.split);
        if let Some(u) = raw.u {
            if (u - rec.u.value()).abs() > 1e-9 {
                return Err(Error::Integrity {
                    sample_id: rec.id,
                    msg: format!("stored u {u} disagrees with recomputed {}", rec.u.value()),
                });
            }
        }
        if let Some(emp) = raw.empirical {
            let matches = emp.len() == num_classes
                && emp
                    .iter()
                    .zip(rec.empirical.probs())
                    .all(|(a, b)| (a - b).abs() <= 1e-9);
            if !matches {
                return Err(Error::Integrity {
                    sample_id: rec.id,
                    msg: "stored empirical distribution disagrees with votes".into(),
                });
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(records)
}

/// Provenance stored next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub generator: GeneratorSpec,
    pub panel: GraderPanel,
}

pub fn metadata_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_metadata(dataset: &Path, meta: &DatasetMetadata) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)? + "\n";
    write_atomic(&metadata_path(dataset), json.as_bytes())
}

pub fn read_metadata(dataset: &Path) -> Result<Option<DatasetMetadata>> {
    let path = metadata_path(dataset);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub class_counts: Vec<usize>,
    /// Mean uncertainty by true class; `None` for empty classes.
    pub mean_u_by_class: Vec<Option<f64>>,
    pub hard_fraction: f64,
    pub split_counts: [usize; 3],
}

pub fn summarize(records: &[SampleRecord], num_classes: usize, threshold: f64) -> DatasetSummary {
    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![0.0; num_classes];
    let mut hard = 0;
    let mut split_counts = [0usize; 3];
    for r in records {
        counts[r.true_class] += 1;
        sums[r.true_class] += r.u.value();
        if r.u.value() > threshold {
            hard += 1;
        }
        split_counts[r.split as usize] += 1;
    }
    DatasetSummary {
        n: records.len(),
        mean_u_by_class: counts
            .iter()
            .zip(&sums)
            .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
            .collect(),
        class_counts: counts,
        hard_fraction: if records.is_empty() {
            0.0
        } else {
            hard as f64 / records.len() as f64
        },
        split_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_panel_without_ambiguity_reaches_immediate_consensus() {
        let panel = GraderPanel::perfect(21, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in 0..3 {
            let v = simulate_votes(&panel, "x", c, 0.0, &mut rng).unwrap();
            assert_eq!(v.votes(), &[c, c, c]);
        }
    }

    #[test]
    fn confusion_rows_are_stochastic() {
        let panel = GraderPanel::sample(21, 3, 0.6, 1.0, 9).unwrap();
        for g in 0..21 {
            for t in 0..3 {
                let s: f64 = panel.confusion_row(g, t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                let s: f64 = panel.vote_distribution(g, t, 0.4).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stopping_rule_holds() {
        let panel = GraderPanel::sample(21, 3, 0.5, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..2000 {
            let a = (i % 11) as f64 / 10.0;
            let v = simulate_votes(&panel, "x", i % 3, a, &mut rng).unwrap();
            let counts = v.counts();
            let at_three = counts.iter().filter(|&&c| c == CONSENSUS_VOTES).count();
            assert!(at_three == 1 || v.len() == 21);
            assert!(counts.iter().all(|&c| c <= CONSENSUS_VOTES));
            assert_eq!(counts[*v.votes().last().unwrap()], CONSENSUS_VOTES);
        }
    }

    #[test]
    fn small_panel_can_be_exhausted() {
        let panel = GraderPanel::sample(4, 3, 0.0, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut exhausted = 0;
        for _ in 0..500 {
            let v = simulate_votes(&panel, "x", 0, 1.0, &mut rng).unwrap();
            if v.counts().iter().all(|&c| c < CONSENSUS_VOTES) {
                assert_eq!(v.len(), 4);
                exhausted += 1;
            }
        }
        assert!(exhausted > 0);
    }

    #[test]
    fn panel_validation() {
        assert!(GraderPanel::perfect(2, 3).is_err());
        assert!(GraderPanel::sample(5, 3, 0.9, 0.8, 0).is_err());
        let panel = GraderPanel::perfect(5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(simulate_votes(&panel, "x", 0, 1.5, &mut rng).is_err());
        assert!(simulate_votes(&panel, "x", 3, 0.5, &mut rng).is_err());
    }

    #[test]
    fn split_sizes_track_fractions() {
        for n in [1usize, 7, 100, 1001, 4999] {
            let f = [0.78, 0.17, 0.05];
            let (a, b, c) = split_sizes(n, f);
            assert_eq!(a + b + c, n);
            for (size, frac) in [(a, f[0]), (b, f[1]), (c, f[2])] {
                assert!((size as f64 - n as f64 * frac).abs() <= 1.0 + 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn zero_ambiguity_with_perfect_panel_is_all_simple() {
        let spec = GeneratorSpec {
            ambiguity_scale: 0.0,
            ..GeneratorSpec::default()
        };
        let panel = GraderPanel::perfect(21, 3).unwrap();
        let recs = generate_dataset(&spec, &panel, 300, 5).unwrap();
        for r in &recs {
            assert_eq!(r.u.value(), 0.0);
            assert_eq!(r.label(), r.true_class);
        }
    }

    #[test]
    fn spec_validation() {
        let s = GeneratorSpec {
            class_weights: vec![0.5, 0.5, 0.5],
            ..GeneratorSpec::default()
        };
        assert!(s.validate().is_err());
        let s = GeneratorSpec {
            severity_centers: vec![0.0, 0.0, 1.0],
            ..GeneratorSpec::default()
        };
        assert!(s.validate().is_err());
        let panel = GraderPanel::perfect(21, 3).unwrap();
        assert!(generate_dataset(&GeneratorSpec::default(), &panel, 0, 1).is_err());
    }
}

//! Grader-vote aggregation and label uncertainty.
//!
//! A sample graded by `M` graders over `K` severity classes is summarised by the
//! empirical vote histogram. Its Shannon entropy is the sample's label
//! uncertainty, and thresholding that entropy splits samples into simple and
//! hard cases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest panel that still yields a meaningful vote.
pub const MIN_GRADERS: usize = 3;

/// Default simple/hard cut-off, in nats.
pub const DEFAULT_PARTITION_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraderVotes {
    sample_id: String,
    votes: Vec<usize>,
    num_classes: usize,
}

impl GraderVotes {
    pub fn new(sample_id: impl Into<String>, votes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let sample_id = sample_id.into();
        if num_classes == 0 {
            return Err(Error::InvalidVotes(format!(
                "sample `{sample_id}`: class count must be positive"
            )));
        }
        if votes.is_empty() {
            return Err(Error::InvalidVotes(format!("sample `{sample_id}`: empty vote list")));
        }
        if votes.len() < MIN_GRADERS {
            return Err(Error::InvalidVotes(format!(
                "sample `{sample_id}`: {} vote(s), at least {MIN_GRADERS} required",
                votes.len()
            )));
        }
        if let Some(&bad) = votes.iter().find(|&&v| v >= num_classes) {
            return Err(Error::InvalidVotes(format!(
                "sample `{sample_id}`: vote {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            sample_id,
            votes,
            num_classes,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn votes(&self) -> &[usize] {
        &self.votes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }

    /// Per-class vote counts.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &v in &self.votes {
            counts[v] += 1;
        }
        counts
    }
}

/// Normalised class-vote histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmpiricalDistribution {
    probs: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Wraps an arbitrary probability vector, checking it is a distribution.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entries must be finite and nonnegative: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Entropy of a grader-vote histogram. Nonnegative and at most `log(K)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UncertaintyScore(pub f64);

impl UncertaintyScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseKind {
    Simple,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CasePartition {
    pub threshold: f64,
    pub assignment: CaseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityLabel {
    pub class_index: usize,
    pub one_hot: Vec<f64>,
    /// Set when more than one class shared the top vote count; the lowest index won.
    pub tied: bool,
}

pub fn empirical_distribution(votes: &GraderVotes) -> EmpiricalDistribution {
    let m = votes.len() as f64;
    let probs = votes.counts().into_iter().map(|c| c as f64 / m).collect();
    EmpiricalDistribution { probs }
}

/// Target encoding for the hard-case stream. Numerically identical to
/// [`empirical_distribution`]; collapses to the majority one-hot when all
/// graders agree.
pub fn variability_encoding(votes: &GraderVotes) -> EmpiricalDistribution {
    empirical_distribution(votes)
}

/// Entropy in nats, with `0 ln 0 = 0`.
pub fn uncertainty_score(dist: &EmpiricalDistribution) -> UncertaintyScore {
    let h: f64 = dist.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    // -p ln p summed over a one-hot vector is -0.0
    UncertaintyScore(h.max(0.0))
}

/// Entropy in an arbitrary logarithm base.
pub fn uncertainty_score_in_base(dist: &EmpiricalDistribution, base: f64) -> Result<UncertaintyScore> {
    check_log_base(base)?;
    Ok(UncertaintyScore(uncertainty_score(dist).0 / base.ln()))
}

/// Upper bound of the entropy for `K` classes in the given base.
pub fn max_uncertainty(num_classes: usize, base: f64) -> f64 {
    (num_classes as f64).ln() / base.ln()
}

pub fn check_log_base(base: f64) -> Result<()> {
    if !(base.is_finite() && base > 0.0 && base != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "log base must be positive and != 1, got {base}"
        )));
    }
    Ok(())
}

pub fn majority_label(votes: &GraderVotes) -> MajorityLabel {
    let counts = votes.counts();
    let top = counts.iter().copied().max().unwrap_or(0);
    let class_index = counts.iter().position(|&c| c == top).unwrap_or(0);
    let tied = counts.iter().filter(|&&c| c == top).count() > 1;
    let mut one_hot = vec![0.0; votes.num_classes()];
    one_hot[class_index] = 1.0;
    MajorityLabel {
        class_index,
        one_hot,
        tied,
    }
}

/// `Hard` iff the score strictly exceeds the threshold.
pub fn partition_case(u: UncertaintyScore, threshold: f64) -> Result<CasePartition> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "partition threshold must be nonnegative, got {threshold}"
        )));
    }
    let assignment = if u.0 > threshold {
        CaseKind::Hard
    } else {
        CaseKind::Simple
    };
    Ok(CasePartition { threshold, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(v: &[usize], k: usize) -> GraderVotes {
        GraderVotes::new("t", v.to_vec(), k).unwrap()
    }

    #[test]
    fn empirical_distribution_examples() {
        assert_eq!(empirical_distribution(&votes(&[0, 0, 0], 3)).probs(), &[1.0, 0.0, 0.0]);
        let d = empirical_distribution(&votes(&[0, 0, 1], 3));
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.probs()[2], 0.0);
        let d = empirical_distribution(&votes(&[0, 0, 0, 1, 2], 3));
        assert_eq!(d.probs(), &[0.6, 0.2, 0.2]);
    }

    #[test]
    fn invalid_votes_are_rejected() {
        assert!(GraderVotes::new("a", vec![], 3).is_err());
        assert!(GraderVotes::new("a", vec![0, 1], 3).is_err());
        let err = GraderVotes::new("a", vec![0, 1, 3], 3).unwrap_err();
        assert!(err.to_string().contains("out of range"));
        assert!(GraderVotes::new("a", vec![0, 0, 0], 0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let one_hot = EmpiricalDistribution::from_probs(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(uncertainty_score(&one_hot).value(), 0.0);
        let uniform = empirical_distribution(&votes(&[0, 1, 2], 3));
        assert!((uncertainty_score(&uniform).value() - 1.098612).abs() < 1e-6);
        let skewed = empirical_distribution(&votes(&[0, 0, 1], 3));
        assert!((uncertainty_score(&skewed).value() - 0.636514).abs() < 1e-6);
    }

    #[test]
    fn entropy_in_bits() {
        let d = EmpiricalDistribution::from_probs(vec![0.5, 0.5]).unwrap();
        assert!((uncertainty_score_in_base(&d, 2.0).unwrap().value() - 1.0).abs() < 1e-15);
        assert!(uncertainty_score_in_base(&d, 1.0).is_err());
        assert!((max_uncertainty(4, 2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn majority_examples() {
        let m = majority_label(&votes(&[0, 0, 1], 3));
        assert_eq!(m.class_index, 0);
        assert_eq!(m.one_hot, vec![1.0, 0.0, 0.0]);
        assert!(!m.tied);
        assert_eq!(majority_label(&votes(&[2, 2, 2], 3)).class_index, 2);
        let tie = majority_label(&votes(&[2, 1, 2, 1], 3));
        assert_eq!(tie.class_index, 1);
        assert!(tie.tied);
    }

    #[test]
    fn variability_encoding_examples() {
        let unanimous = votes(&[1, 1, 1], 3);
        assert_eq!(
            variability_encoding(&unanimous).probs(),
            majority_label(&unanimous).one_hot.as_slice()
        );
        assert_eq!(variability_encoding(&votes(&[0, 1, 2], 3)).probs(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(
            partition_case(UncertaintyScore(0.0), 0.25).unwrap().assignment,
            CaseKind::Simple
        );
        assert_eq!(
            partition_case(UncertaintyScore(0.636514), 0.25).unwrap().assignment,
            CaseKind::Hard
        );
        assert_eq!(
            partition_case(UncertaintyScore(0.25), 0.25).unwrap().assignment,
            CaseKind::Simple
        );
        assert!(partition_case(UncertaintyScore(0.1), -0.1).is_err());
        assert!(partition_case(UncertaintyScore(0.1), f64::NAN).is_err());
    }

    #[test]
    fn from_probs_validation() {
        assert!(EmpiricalDistribution::from_probs(vec![0.5, 0.6]).is_err());
        assert!(EmpiricalDistribution::from_probs(vec![1.5, -0.5]).is_err());
        assert!(EmpiricalDistribution::from_probs(vec![]).is_err());
    }
}

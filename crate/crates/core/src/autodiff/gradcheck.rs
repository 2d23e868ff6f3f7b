//! Central finite-difference verification of the training objectives.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{self, Hyperparams};
use crate::seed::derive_seed;

use super::backbone::{Backbone, ParamStore};
use super::graph::{Gradients, Graph};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Samples whose Pearson distance lies within this band of the margin are
/// excluded so that no finite-difference probe straddles the hinge kink.
pub const KINK_CLEARANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    Mse,
    CrossEntropy,
    Ugf,
    Ufd,
    Joint,
}

impl LossSpec {
    pub const ALL: [LossSpec; 5] = [
        LossSpec::Mse,
        LossSpec::CrossEntropy,
        LossSpec::Ugf,
        LossSpec::Ufd,
        LossSpec::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSpec::Mse => "mse",
            LossSpec::CrossEntropy => "cross_entropy",
            LossSpec::Ugf => "ugf",
            LossSpec::Ufd => "ufd",
            LossSpec::Joint => "joint",
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a loss needs besides the network output.
#[derive(Debug, Clone)]
pub struct CheckBatch {
    pub inputs: Tensor,
    /// `[N, K]` class targets, or `[N, 1]` uncertainty targets for MSE.
    pub targets: Tensor,
    pub u: Vec<f64>,
    /// Frozen uncertainty features, `[N, F]`; required by UFD and joint.
    pub f_un: Option<Tensor>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: LossSpec,
    pub max_rel_error: f64,
    pub checked: usize,
    pub samples: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Loss value (and gradients when requested) of `spec` on `batch`.
pub fn evaluate(
    backbone: &Backbone,
    params: &ParamStore,
    spec: LossSpec,
    batch: &CheckBatch,
    hp: &Hyperparams,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let mut g = Graph::new();
    let x = g.constant(batch.inputs.clone());
    let (out, feat) = backbone.forward_graph(&mut g, params, x);
    let t = g.constant(batch.targets.clone());
    let f_un = || {
        batch
            .f_un
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("{spec} needs uncertainty features")))
    };
    let loss = match spec {
        LossSpec::Mse => losses::mse_graph(&mut g, out, t),
        LossSpec::CrossEntropy => losses::cross_entropy_graph(&mut g, out, t),
        LossSpec::Ugf => losses::ugf_graph(&mut g, out, t, &batch.u, hp.gamma),
        LossSpec::Ufd => {
            let fu = g.constant(f_un()?);
            losses::ufd_graph(&mut g, feat, fu, &batch.u, hp)
        }
        LossSpec::Joint => {
            let ugf = losses::ugf_graph(&mut g, out, t, &batch.u, hp.gamma);
            let fu = g.constant(f_un()?);
            let ufd = losses::ufd_graph(&mut g, feat, fu, &batch.u, hp);
            losses::joint_graph(&mut g, ugf, ufd, hp)
        }
    };
    let value = g.scalar(loss);
    let grads = if with_grad { Some(g.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Maximum over every parameter of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck(
    backbone: &Backbone,
    params: &ParamStore,
    spec: LossSpec,
    batch: &CheckBatch,
    hp: &Hyperparams,
    step: f64,
) -> Result<GradcheckReport> {
    backbone.check_batch(&batch.inputs)?;
    let (_, grads) = evaluate(backbone, params, spec, batch, hp, true)?;
    let grads = grads.expect("requested gradients");
    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .data()
            .to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(name).expect("name from store").data()[i];
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig + step;
            let (fp, _) = evaluate(backbone, &work, spec, batch, hp, false)?;
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig - step;
            let (fm, _) = evaluate(backbone, &work, spec, batch, hp, false)?;
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Numerical(format!("{spec}: non-finite gradient at {name}[{i}]")));
            }
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        loss: spec,
        max_rel_error: max_rel,
        checked,
        samples: batch.inputs.rows(),
    })
}

/// Layout of the throwaway networks used by [`run_suite`].
#[derive(Debug, Clone, Copy)]
pub struct SuiteLayout {
    pub input_width: usize,
    pub hidden: [usize; 2],
    pub num_classes: usize,
    pub batch: usize,
}

impl Default for SuiteLayout {
    fn default() -> Self {
        Self {
            input_width: 6,
            hidden: [8, 6],
            num_classes: 3,
            batch: 8,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..n * m).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(vec![n, m], data)
}

fn random_distribution_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.into_iter().map(|v| v / s));
    }
    Tensor::from_parts(vec![n, k], data)
}

/// Checks all five objectives on freshly initialised small networks.
pub fn run_suite(seed: u64, hp: &Hyperparams, step: f64) -> Result<Vec<GradcheckReport>> {
    let layout = SuiteLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck.data"));
    let n = layout.batch;
    let k = layout.num_classes;
    let classifier = Backbone::classifier(layout.input_width, &layout.hidden, k);
    let regressor = Backbone::regressor(layout.input_width, &layout.hidden);
    let hc = ParamStore::init(&classifier, derive_seed(seed, "gradcheck.hc"))?;
    let us = ParamStore::init(&regressor, derive_seed(seed, "gradcheck.us"))?;
    // Small positive biases keep the hidden units away from the ReLU kink.
    let mut hc = hc;
    for l in 0..layout.hidden.len() {
        for b in hc.get_mut(&Backbone::bias_name(l)).expect("layer bias").data_mut() {
            *b = rng.random_range(0.05..0.2);
        }
    }

    let inputs = random_matrix(&mut rng, n, layout.input_width, -1.0, 1.0);
    let mut reports = Vec::with_capacity(LossSpec::ALL.len());

    // MSE on the regressor.
    let u_targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..(k as f64).ln())).collect();
    let mse_batch = CheckBatch {
        inputs: inputs.clone(),
        targets: Tensor::column(&u_targets)?,
        u: u_targets.clone(),
        f_un: None,
    };
    reports.push(gradcheck(&regressor, &us, LossSpec::Mse, &mse_batch, hp, step)?);

    // CE and UGF on the classifier with soft targets.
    let targets = random_distribution_rows(&mut rng, n, k);
    let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..(k as f64).ln())).collect();
    let cls_batch = CheckBatch {
        inputs: inputs.clone(),
        targets: targets.clone(),
        u: u.clone(),
        f_un: None,
    };
    reports.push(gradcheck(
        &classifier,
        &hc,
        LossSpec::CrossEntropy,
        &cls_batch,
        hp,
        step,
    )?);
    reports.push(gradcheck(&classifier, &hc, LossSpec::Ugf, &cls_batch, hp, step)?);

    // UFD and joint: uncertainty features from a perturbed copy of the
    // classifier trunk, so that most pairs sit inside the margin.
    let mut us_like = us.clone();
    for l in 0..layout.hidden.len() {
        for name in [Backbone::weight_name(l), Backbone::bias_name(l)] {
            let src = hc.get(&name).expect("shared trunk layer").data().to_vec();
            let dst = us_like.get_mut(&name).expect("shared trunk layer").data_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + rng.random_range(-0.3..0.3);
            }
        }
    }
    let f_un = regressor.forward(&us_like, &inputs)?.features;
    let f_di = classifier.forward(&hc, &inputs)?.features;
    let u_margin: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.1)).collect();
    let mut keep = Vec::new();
    for (i, &um) in u_margin.iter().enumerate() {
        let d = losses::pearson_distance(f_di.row(i), f_un.row(i))?;
        let h = losses::decoupling_margin(um, hp.alpha);
        if (h - d).abs() > KINK_CLEARANCE && d < 1.0 - KINK_CLEARANCE {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::Numerical("no gradcheck sample clear of the hinge kink".into()));
    }
    let ufd_batch = CheckBatch {
        inputs: inputs.select_rows(&keep),
        targets: targets.select_rows(&keep),
        u: keep.iter().map(|&i| u_margin[i]).collect(),
        f_un: Some(f_un.select_rows(&keep)),
    };
    reports.push(gradcheck(&classifier, &hc, LossSpec::Ufd, &ufd_batch, hp, step)?);
    reports.push(gradcheck(&classifier, &hc, LossSpec::Joint, &ufd_batch, hp, step)?);
    Ok(reports)
}

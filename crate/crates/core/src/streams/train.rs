//! Mini-batch training of the three streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Backbone, Graph, ParamStore, Tensor, Var};
use crate::datagen::SampleRecord;
use crate::error::{Error, Result};
use crate::label_model::{majority_label, variability_encoding};
use crate::losses::{self, Hyperparams};

use super::ablation::{HcLoss, HcObjective, TargetEncoding};
use super::Net;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop: bool,
    /// Epochs without a new best checkpoint before stopping, when enabled.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            early_stop: false,
            early_stop_patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.early_stop && self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience", "must be positive"));
        }
        self.adam.validate()
    }
}

/// Tensors for one subset of the dataset.
#[derive(Debug, Clone)]
pub struct StreamData {
    pub ids: Vec<String>,
    pub features: Tensor,
    /// Label uncertainty in the configured logarithm base.
    pub u: Vec<f64>,
    /// Majority-vote class.
    pub labels: Vec<usize>,
    pub one_hot: Tensor,
    /// Empirical vote distribution.
    pub soft: Tensor,
}

impl StreamData {
    pub fn from_records(records: &[&SampleRecord], num_classes: usize, log_base: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset("no records for this stream".into()));
        }
        let mut ids = Vec::with_capacity(records.len());
        let mut feats = Vec::with_capacity(records.len());
        let mut u = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        let mut one_hot = Vec::with_capacity(records.len());
        let mut soft = Vec::with_capacity(records.len());
        for r in records {
            if r.votes.num_classes() != num_classes {
                return Err(Error::Integrity {
                    sample_id: r.id.clone(),
                    msg: format!("{} classes, expected {num_classes}", r.votes.num_classes()),
                });
            }
            let m = majority_label(&r.votes);
            ids.push(r.id.clone());
            feats.push(r.features.as_slice());
            u.push(r.u.0 / log_base.ln());
            labels.push(m.class_index);
            one_hot.push(m.one_hot);
            soft.push(variability_encoding(&r.votes).into_vec());
        }
        Ok(Self {
            ids,
            features: Tensor::from_rows(&feats)?,
            u,
            labels,
            one_hot: Tensor::from_rows(&one_hot)?,
            soft: Tensor::from_rows(&soft)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.one_hot.cols()
    }

    fn targets(&self, enc: TargetEncoding) -> &Tensor {
        match enc {
            TargetEncoding::OneHot => &self.one_hot,
            TargetEncoding::Variability => &self.soft,
        }
    }
}

/// One row of a per-epoch training log. Epoch 0 describes the initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_ugf: Option<f64>,
    pub val_ufd: Option<f64>,
    /// Mean Pearson distance between disease and uncertainty features on
    /// the training cases.
    pub mean_pearson: Option<f64>,
    /// Fraction of training cases whose decoupling hinge is active.
    pub hinge_active: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,train_loss,val_loss,val_accuracy,val_ugf,val_ufd,mean_pearson,hinge_active";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{},{:.6},{},{},{},{},{}",
            self.epoch,
            self.lr,
            f(self.train_loss),
            self.val_loss,
            f(self.val_accuracy),
            f(self.val_ugf),
            f(self.val_ufd),
            f(self.mean_pearson),
            f(self.hinge_active)
        )
    }
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedStream {
    pub net: Net,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct EpochEval {
    /// Quantity watched by the learning-rate schedule; lower is better.
    monitor: f64,
    /// Checkpoint ranking; higher is better, compared lexicographically.
    score: (f64, f64),
    log: EpochLog,
}

fn fit<L, E>(
    backbone: &Backbone,
    mut params: ParamStore,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut batch_loss: L,
    mut eval: E,
) -> Result<TrainedStream>
where
    L: FnMut(&mut Graph, &ParamStore, &[usize]) -> Var,
    E: FnMut(&ParamStore) -> Result<EpochEval>,
{
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.adam, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();

    let first = eval(&params)?;
    let mut best_score = first.score;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut log = vec![EpochLog {
        lr: adam.lr(),
        ..first.log
    }];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, &params, batch);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut params, &grads)?;
        }
        let lr = adam.lr();
        let ev = eval(&params)?;
        if !ev.monitor.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: Some(total / n as f64),
            ..ev.log
        });
        if ev.score > best_score {
            best_score = ev.score;
            best = params.clone();
            best_epoch = epoch;
        }
        if adam.end_epoch(ev.monitor) {
            log::debug!("epoch {epoch}: learning rate decayed to {}", adam.lr());
        }
        if cfg.early_stop && epoch - best_epoch >= cfg.early_stop_patience {
            log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainedStream {
        net: Net {
            backbone: backbone.clone(),
            params: best,
        },
        best_epoch,
        log,
    })
}

fn base_log(val_loss: f64) -> EpochLog {
    EpochLog {
        epoch: 0,
        lr: 0.0,
        train_loss: None,
        val_loss,
        val_accuracy: None,
        val_ugf: None,
        val_ufd: None,
        mean_pearson: None,
        hinge_active: None,
    }
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| super::argmax(probs.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Regresses label uncertainty from features over every training case.
/// Keeps the weights with the lowest validation MSE.
pub fn train_us_net(
    train: &StreamData,
    val: &StreamData,
    hidden: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedStream> {
    let backbone = Backbone::regressor(train.features.cols(), hidden);
    let params = ParamStore::init(&backbone, seed)?;
    let u_col = Tensor::column(&train.u)?;
    fit(
        &backbone,
        params,
        train.len(),
        cfg,
        seed,
        |g, p, idx| {
            let x = g.constant(train.features.select_rows(idx));
            let t = g.constant(u_col.select_rows(idx));
            let (out, _) = backbone.forward_graph(g, p, x);
            losses::mse_graph(g, out, t)
        },
        |p| {
            let out = backbone.forward(p, &val.features)?;
            let mse = losses::mse_loss(out.output.data(), &val.u)?;
            Ok(EpochEval {
                monitor: mse,
                score: (-mse, 0.0),
                log: base_log(mse),
            })
        },
    )
}

/// Majority-label classifier over the simple cases. Keeps the weights with
/// the best validation accuracy, breaking ties by validation loss.
pub fn train_sc_net(
    train: &StreamData,
    val: &StreamData,
    hidden: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedStream> {
    let k = train.num_classes();
    for c in 0..k {
        if !train.labels.contains(&c) {
            log::warn!("class {c} is absent from the simple-case training set");
        }
    }
    let backbone = Backbone::classifier(train.features.cols(), hidden, k);
    let params = ParamStore::init(&backbone, seed)?;
    fit(
        &backbone,
        params,
        train.len(),
        cfg,
        seed,
        |g, p, idx| {
            let x = g.constant(train.features.select_rows(idx));
            let t = g.constant(train.one_hot.select_rows(idx));
            let (probs, _) = backbone.forward_graph(g, p, x);
            losses::cross_entropy_graph(g, probs, t)
        },
        |p| {
            let out = backbone.forward(p, &val.features)?;
            let ce = losses::cross_entropy(&out.output, &val.one_hot)?;
            let acc = accuracy(&out.output, &val.labels);
            Ok(EpochEval {
                monitor: ce,
                score: (acc, -ce),
                log: EpochLog {
                    val_accuracy: Some(acc),
                    ..base_log(ce)
                },
            })
        },
    )
}

fn uncertainty_features(us: &Net, data: &StreamData, width: usize) -> Result<Tensor> {
    let f = us.backbone.forward(&us.params, &data.features)?.features;
    if f.cols() != width {
        return Err(Error::shape(format!(
            "uncertainty features have width {}, disease features {width}",
            f.cols()
        )));
    }
    Ok(f)
}

/// The hard-case stream before its first update: a copy of the simple-case
/// stream.
pub fn transfer_init(sc: &Net) -> Net {
    sc.clone()
}

/// Hard-case classifier initialised from the trained simple-case weights.
/// The uncertainty stream is only read. Keeps the weights with the lowest
/// validation objective.
#[allow(clippy::too_many_arguments)]
pub fn train_hc_net(
    train: &StreamData,
    val: &StreamData,
    sc: &Net,
    us: Option<&Net>,
    cfg: &TrainConfig,
    hp: &Hyperparams,
    objective: HcObjective,
    seed: u64,
) -> Result<TrainedStream> {
    hp.validate()?;
    let Net { backbone, params } = transfer_init(sc);
    if train.num_classes() != backbone.output_width {
        return Err(Error::shape(format!(
            "hard cases have {} classes, classifier has {}",
            train.num_classes(),
            backbone.output_width
        )));
    }
    let width = backbone.feature_width();
    let fun = match (objective.loss, us) {
        (HcLoss::Joint, None) => {
            return Err(Error::InvalidArgument(
                "feature decoupling needs trained uncertainty-stream parameters".into(),
            ))
        }
        (_, Some(us)) => Some((
            uncertainty_features(us, train, width)?,
            uncertainty_features(us, val, width)?,
        )),
        (_, None) => None,
    };
    let targets = train.targets(objective.targets);
    let val_targets = val.targets(objective.targets);

    fit(
        &backbone,
        params,
        train.len(),
        cfg,
        seed,
        |g, p, idx| {
            let x = g.constant(train.features.select_rows(idx));
            let t = g.constant(targets.select_rows(idx));
            let (probs, f_di) = backbone.forward_graph(g, p, x);
            match objective.loss {
                HcLoss::CrossEntropy => losses::cross_entropy_graph(g, probs, t),
                HcLoss::Ugf | HcLoss::Joint => {
                    let u: Vec<f64> = idx.iter().map(|&i| train.u[i]).collect();
                    let ugf = losses::ugf_graph(g, probs, t, &u, hp.gamma);
                    if objective.loss == HcLoss::Ugf {
                        return ugf;
                    }
                    let (fun_train, _) = fun.as_ref().expect("checked above");
                    let f_un = g.constant(fun_train.select_rows(idx));
                    let ufd = losses::ufd_graph(g, f_di, f_un, &u, hp);
                    losses::joint_graph(g, ugf, ufd, hp)
                }
            }
        },
        |p| {
            let out = backbone.forward(p, &val.features)?;
            let ugf = losses::ugf_loss(&out.output, val_targets, &val.u, hp)?;
            let mut log = base_log(0.0);
            log.val_accuracy = Some(accuracy(&out.output, &val.labels));
            log.val_ugf = Some(ugf);
            let loss = match objective.loss {
                HcLoss::CrossEntropy => losses::cross_entropy(&out.output, val_targets)?,
                HcLoss::Ugf => ugf,
                HcLoss::Joint => {
                    let (_, fun_val) = fun.as_ref().expect("checked above");
                    let ufd = losses::ufd_loss(&out.features, fun_val, &val.u, hp)?;
                    log.val_ufd = Some(ufd);
                    ugf + hp.ufd_weight * ufd
                }
            };
            if let Some((fun_train, _)) = &fun {
                let f_di = backbone.forward(p, &train.features)?.features;
                let d = losses::pearson_distances(&f_di, fun_train)?;
                let n = d.len() as f64;
                log.mean_pearson = Some(d.iter().sum::<f64>() / n);
                let active = d
                    .iter()
                    .zip(&train.u)
                    .filter(|&(di, &ui)| losses::decoupling_margin(ui, hp.alpha) > *di)
                    .count();
                log.hinge_active = Some(active as f64 / n);
            }
            log.val_loss = loss;
            Ok(EpochEval {
                monitor: loss,
                score: (-loss, 0.0),
                log,
            })
        },
    )
}

//! End-to-end training: split the records, train US and SC once, then one
//! HC stream per requested variant.

use crate::config::Config;
use crate::datagen::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::{train_hc_net, train_sc_net, train_us_net, AblationLevel, StreamBundle, StreamData, TrainedStream};

/// Records grouped by split and by empirical case kind.
pub struct Partitioned<'a> {
    pub train: Vec<&'a SampleRecord>,
    pub val: Vec<&'a SampleRecord>,
    pub test: Vec<&'a SampleRecord>,
    /// Empirical label uncertainty above which a case is hard, in nats.
    pub threshold_nats: f64,
}

impl<'a> Partitioned<'a> {
    pub fn new(records: &'a [SampleRecord], cfg: &Config) -> Self {
        let pick = |s: Split| records.iter().filter(|r| r.split == s).collect::<Vec<_>>();
        Self {
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
            threshold_nats: cfg.screening.u_threshold * cfg.screening.log_base.ln(),
        }
    }

    pub fn is_hard(&self, r: &SampleRecord) -> bool {
        r.u.0 > self.threshold_nats
    }

    pub fn hard(&self, set: &[&'a SampleRecord]) -> Vec<&'a SampleRecord> {
        set.iter().copied().filter(|r| self.is_hard(r)).collect()
    }

    pub fn simple(&self, set: &[&'a SampleRecord]) -> Vec<&'a SampleRecord> {
        set.iter().copied().filter(|r| !self.is_hard(r)).collect()
    }
}

/// Validation data, falling back to the training subset when the split has
/// no cases of that kind.
fn with_fallback(train: &StreamData, val: Option<StreamData>, what: &str) -> StreamData {
    val.unwrap_or_else(|| {
        log::warn!("no {what} validation cases; validating on the training cases");
        train.clone()
    })
}

fn data(records: &[&SampleRecord], cfg: &Config) -> Result<Option<StreamData>> {
    if records.is_empty() {
        return Ok(None);
    }
    StreamData::from_records(records, cfg.generator.num_classes, cfg.screening.log_base).map(Some)
}

/// US and SC streams plus the hard-case tensors the HC variants train on.
pub struct BaseStreams {
    pub us: TrainedStream,
    pub sc: TrainedStream,
    pub hard: Option<(StreamData, StreamData)>,
}

pub fn train_base(records: &[SampleRecord], cfg: &Config) -> Result<BaseStreams> {
    cfg.validate()?;
    let parts = Partitioned::new(records, cfg);
    let all_train = data(&parts.train, cfg)?.ok_or_else(|| Error::EmptyDataset("no training records".into()))?;
    let all_val = with_fallback(&all_train, data(&parts.val, cfg)?, "uncertainty");

    log::info!("training US-Net on {} cases", all_train.len());
    let us = train_us_net(
        &all_train,
        &all_val,
        &cfg.hidden,
        &cfg.train,
        derive_seed(cfg.seed, "stream.us"),
    )?;

    let simple_train = data(&parts.simple(&parts.train), cfg)?
        .ok_or_else(|| Error::InvalidArgument("no simple cases in the training split".into()))?;
    let simple_val = with_fallback(&simple_train, data(&parts.simple(&parts.val), cfg)?, "simple-case");
    log::info!("training SC-Net on {} simple cases", simple_train.len());
    let sc = train_sc_net(
        &simple_train,
        &simple_val,
        &cfg.hidden,
        &cfg.train,
        derive_seed(cfg.seed, "stream.sc"),
    )?;

    let hard = match data(&parts.hard(&parts.train), cfg)? {
        None => {
            log::warn!(
                "no hard cases in the training split; the hard-case stream is skipped and the bundle is SC-only"
            );
            None
        }
        Some(train) => {
            let val = with_fallback(&train, data(&parts.hard(&parts.val), cfg)?, "hard-case");
            Some((train, val))
        }
    };
    Ok(BaseStreams { us, sc, hard })
}

/// Trains the hard-case stream for one variant; `None` when there are no
/// hard cases.
pub fn train_variant(base: &BaseStreams, level: AblationLevel, cfg: &Config) -> Result<Option<TrainedStream>> {
    let Some((train, val)) = &base.hard else {
        return Ok(None);
    };
    log::info!("training HC-Net ({level}) on {} hard cases", train.len());
    train_hc_net(
        train,
        val,
        &base.sc.net,
        Some(&base.us.net),
        &cfg.train,
        &cfg.hyperparams,
        level.objective(),
        derive_seed(cfg.seed, "stream.hc"),
    )
    .map(Some)
}

pub fn assemble(base: &BaseStreams, hc: Option<&TrainedStream>, level: AblationLevel, cfg: &Config) -> StreamBundle {
    StreamBundle {
        num_classes: cfg.generator.num_classes,
        u_threshold: cfg.screening.u_threshold,
        log_base: cfg.screening.log_base,
        hyperparams: cfg.hyperparams,
        referable: cfg.screening.referable.clone(),
        variant: level,
        us: base.us.net.clone(),
        sc: base.sc.net.clone(),
        hc: hc.map(|t| t.net.clone()),
    }
}

pub struct TrainedPipeline {
    pub bundle: StreamBundle,
    pub base: BaseStreams,
    pub hc: Option<TrainedStream>,
}

pub fn train_pipeline(records: &[SampleRecord], cfg: &Config, level: AblationLevel) -> Result<TrainedPipeline> {
    let base = train_base(records, cfg)?;
    let hc = train_variant(&base, level, cfg)?;
    let bundle = assemble(&base, hc.as_ref(), level, cfg);
    Ok(TrainedPipeline { bundle, base, hc })
}

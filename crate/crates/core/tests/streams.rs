use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uncscreen::autodiff::{Backbone, ParamStore};
use uncscreen::config::Config;
use uncscreen::datagen::{SampleRecord, Split};
use uncscreen::experiment::simulate;
use uncscreen::label_model::GraderVotes;
use uncscreen::losses::{cross_entropy, Hyperparams};
use uncscreen::streams::pipeline::{train_base, Partitioned};
use uncscreen::streams::{
    argmax, hard_route_referable, train_hc_net, train_sc_net, train_us_net, AblationLevel, HcLoss, HcObjective, Net,
    Route, StreamData, TargetEncoding, TrainConfig,
};
use uncscreen::Error;

const E: f64 = std::f64::consts::E;

/// Gaussian blobs, one per class, with the given vote pattern per class.
fn blobs(n: usize, k: usize, spread: f64, seed: u64, votes: impl Fn(usize) -> Vec<usize>) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).unwrap();
    (0..n)
        .map(|i| {
            let c = i % k;
            let features: Vec<f64> = (0..6)
                .map(|j| if j == c { 3.0 } else { 0.0 } + noise.sample(&mut rng))
                .collect();
            let id = format!("b{i}");
            let v = GraderVotes::new(id.clone(), votes(c), k).unwrap();
            let split = if rng.random_bool(0.8) { Split::Train } else { Split::Val };
            SampleRecord::new(id, features, c, v, split)
        })
        .collect()
}

fn stream(records: &[SampleRecord], split: Split, k: usize) -> StreamData {
    let rs: Vec<&SampleRecord> = records.iter().filter(|r| r.split == split).collect();
    StreamData::from_records(&rs, k, E).unwrap()
}

fn accuracy(net: &Net, data: &StreamData) -> f64 {
    let out = net.forward(&data.features).unwrap().output;
    let hits = (0..data.len())
        .filter(|&i| argmax(out.row(i)) == data.labels[i])
        .count();
    hits as f64 / data.len() as f64
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn uncertainty_regressor_learns_a_constant_zero() {
    let records = blobs(400, 3, 0.5, 1, |c| vec![c; 3]);
    let (train, val) = (stream(&records, Split::Train, 3), stream(&records, Split::Val, 3));
    let us = train_us_net(&train, &val, &[16, 8], &short(100), 3).unwrap();
    let out = us.net.forward(&val.features).unwrap().output;
    let mse = out.data().iter().map(|x| x * x).sum::<f64>() / val.len() as f64;
    assert!(mse < 1e-3, "val MSE {mse}");
    assert!(out.data().iter().all(|x| x.abs() < 0.1));
}

#[test]
fn uncertainty_regressor_improves_on_generated_data() {
    let cfg = Config {
        seed: 7,
        n: 1500,
        ..Config::default()
    };
    let (records, _) = simulate(&cfg).unwrap();
    let (train, val) = (stream(&records, Split::Train, 3), stream(&records, Split::Val, 3));
    let us = train_us_net(&train, &val, &cfg.hidden, &short(20), 7).unwrap();
    assert!(us.log[us.best_epoch].val_loss < us.log[0].val_loss);
}

#[test]
fn simple_classifier_separates_blobs_and_starts_near_ln_k() {
    let records = blobs(600, 3, 0.6, 2, |c| vec![c; 3]);
    let (train, val) = (stream(&records, Split::Train, 3), stream(&records, Split::Val, 3));
    let sc = train_sc_net(&train, &val, &[64, 32], &TrainConfig::default(), 4).unwrap();
    let acc = accuracy(&sc.net, &train);
    assert!(acc > 0.95, "training accuracy {acc}");
    // Glorot start: close to, not exactly, uniform
    assert!((sc.log[0].val_loss - 3f64.ln()).abs() < 0.5, "{}", sc.log[0].val_loss);

    // an all-zero network is exactly uniform
    let backbone = Backbone::classifier(6, &[8], 3);
    let zeros = ParamStore::zeros(&backbone).unwrap();
    let probs = backbone.forward(&zeros, &val.features).unwrap().output;
    assert!((cross_entropy(&probs, &val.one_hot).unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn single_class_subset_predicts_that_class() {
    let records: Vec<_> = blobs(300, 3, 0.6, 3, |c| vec![c; 3])
        .into_iter()
        .filter(|r| r.true_class == 2)
        .collect();
    let (train, val) = (stream(&records, Split::Train, 3), stream(&records, Split::Val, 3));
    let sc = train_sc_net(&train, &val, &[16, 8], &short(10), 1).unwrap();
    let out = sc.net.forward(&val.features).unwrap().output;
    assert!((0..val.len()).all(|i| argmax(out.row(i)) == 2));
}

/// US and SC trained on blobs, plus hard-looking data with split votes.
fn hard_setup() -> (Net, Net, StreamData, StreamData) {
    let simple = blobs(450, 3, 0.6, 5, |c| vec![c; 3]);
    let hard = blobs(300, 3, 1.2, 6, |c| vec![c, c, c, (c + 1) % 3, (c + 1) % 3]);
    let all: Vec<SampleRecord> = simple.iter().chain(&hard).cloned().collect();
    let us = train_us_net(
        &stream(&all, Split::Train, 3),
        &stream(&all, Split::Val, 3),
        &[16, 8],
        &short(15),
        1,
    )
    .unwrap();
    let sc = train_sc_net(
        &stream(&simple, Split::Train, 3),
        &stream(&simple, Split::Val, 3),
        &[16, 8],
        &short(15),
        2,
    )
    .unwrap();
    (
        us.net,
        sc.net,
        stream(&hard, Split::Train, 3),
        stream(&hard, Split::Val, 3),
    )
}

#[test]
fn hard_stream_starts_from_the_simple_stream_and_leaves_us_alone() {
    let (us, sc, train, val) = hard_setup();
    let us_before = us.params.clone();
    let hp = Hyperparams::default();
    let hc = train_hc_net(
        &train,
        &val,
        &sc,
        Some(&us),
        &short(5),
        &hp,
        AblationLevel::M4.objective(),
        9,
    )
    .unwrap();
    assert_eq!(us.params, us_before);

    // epoch 0 logs the simple-case weights on the hard validation cases
    let sc_out = sc.forward(&val.features).unwrap().output;
    let sc_acc = accuracy(&sc, &val);
    assert_eq!(hc.log[0].val_accuracy, Some(sc_acc));
    let ugf = uncscreen::losses::ugf_loss(&sc_out, &val.soft, &val.u, &hp).unwrap();
    assert_eq!(hc.log[0].val_ugf, Some(ugf));

    let m1 = train_hc_net(
        &train,
        &val,
        &sc,
        None,
        &short(3),
        &hp,
        AblationLevel::M1.objective(),
        9,
    )
    .unwrap();
    assert_eq!(m1.log[0].val_loss, cross_entropy(&sc_out, &val.one_hot).unwrap());
    assert_eq!(m1.net.backbone, sc.backbone);
}

#[test]
fn joint_objective_requires_the_uncertainty_stream() {
    let (_, sc, train, val) = hard_setup();
    let err = train_hc_net(
        &train,
        &val,
        &sc,
        None,
        &short(1),
        &Hyperparams::default(),
        AblationLevel::M4.objective(),
        1,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn soft_targets_equal_one_hot_on_unanimous_votes() {
    let records = blobs(300, 3, 0.8, 8, |c| vec![c; 4]);
    let (train, val) = (stream(&records, Split::Train, 3), stream(&records, Split::Val, 3));
    let sc = train_sc_net(&train, &val, &[16, 8], &short(3), 1).unwrap();
    let hp = Hyperparams::default();
    let m1 = train_hc_net(
        &train,
        &val,
        &sc.net,
        None,
        &short(5),
        &hp,
        AblationLevel::M1.objective(),
        4,
    )
    .unwrap();
    let m2 = train_hc_net(
        &train,
        &val,
        &sc.net,
        None,
        &short(5),
        &hp,
        AblationLevel::M2.objective(),
        4,
    )
    .unwrap();
    assert_eq!(m1.net.params, m2.net.params);
    assert_eq!(m1.log, m2.log);
}

#[test]
fn focal_training_tracks_cross_entropy_at_tiny_uncertainty() {
    let (_, sc, mut train, mut val) = hard_setup();
    for u in train.u.iter_mut().chain(val.u.iter_mut()) {
        *u = 1e-9;
    }
    let hp = Hyperparams::default();
    let ce = HcObjective {
        targets: TargetEncoding::Variability,
        loss: HcLoss::CrossEntropy,
    };
    let a = train_hc_net(&train, &val, &sc, None, &short(3), &hp, ce, 2).unwrap();
    let b = train_hc_net(
        &train,
        &val,
        &sc,
        None,
        &short(3),
        &hp,
        AblationLevel::M3.objective(),
        2,
    )
    .unwrap();
    let (pa, pb) = (
        a.net.forward(&val.features).unwrap().output,
        b.net.forward(&val.features).unwrap().output,
    );
    let diff = pa
        .data()
        .iter()
        .zip(pb.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-3, "max prob difference {diff}");
}

#[test]
fn decoupling_pushes_features_apart_when_the_hinge_is_active() {
    let cfg = Config {
        seed: 7,
        n: 2000,
        ..Config::default()
    };
    let (records, _) = simulate(&cfg).unwrap();
    let base = train_base(&records, &cfg).unwrap();
    let (train, val) = base.hard.as_ref().unwrap();
    let hc = train_hc_net(
        train,
        val,
        &base.sc.net,
        Some(&base.us.net),
        &cfg.train,
        &cfg.hyperparams,
        AblationLevel::M4.objective(),
        7,
    )
    .unwrap();
    let first = &hc.log[0];
    let best = &hc.log[hc.best_epoch];
    // the run must exercise the hinge for the comparison to mean anything
    assert!(first.hinge_active.unwrap() > 0.0 && hc.best_epoch > 0);
    assert!(best.mean_pearson.unwrap() > first.mean_pearson.unwrap());
}

#[test]
fn hard_route_decision_is_monotone_in_uncertainty() {
    let hp = Hyperparams::default();
    let referable = [false, true, true];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let mut seen = false;
        for &u in &grid {
            let (r, _) = hard_route_referable(&probs, u, &referable, &hp).unwrap();
            assert!(r || !seen, "{probs:?} flips back at u = {u}");
            seen |= r;
        }
    }
}

#[test]
fn every_sample_takes_exactly_one_route() {
    let cfg = Config {
        seed: 3,
        n: 800,
        train: short(5),
        ..Config::default()
    };
    let (records, _) = simulate(&cfg).unwrap();
    let trained = uncscreen::streams::pipeline::train_pipeline(&records, &cfg, AblationLevel::M4).unwrap();
    let parts = Partitioned::new(&records, &cfg);
    let rows: Vec<&[f64]> = parts.test.iter().map(|r| r.features.as_slice()).collect();
    let decisions = trained
        .bundle
        .infer_batch(&uncscreen::autodiff::Tensor::from_rows(&rows).unwrap())
        .unwrap();
    let simple = decisions.iter().filter(|d| d.route == Route::SimpleRoute).count();
    let hard = decisions.iter().filter(|d| d.route == Route::HardRoute).count();
    assert_eq!(simple + hard, rows.len());
    for d in &decisions {
        assert_eq!(d.route == Route::HardRoute, d.u_clamped > cfg.screening.u_threshold);
    }
}

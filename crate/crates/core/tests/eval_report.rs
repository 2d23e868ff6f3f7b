use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uncscreen::config::Config;
use uncscreen::eval_report::{auc, evaluate, f1_per_class, ConfusionCounts, Group};
use uncscreen::experiment::{eval_setup, simulate};
use uncscreen::label_model::majority_label;
use uncscreen::streams::{Route, ScreeningDecision};

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn concordance(scores: &[(f64, bool)]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for p in scores.iter().filter(|s| s.1) {
        for n in scores.iter().filter(|s| !s.1) {
            pairs += 1.0;
            num += if p.0 > n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

#[test]
fn auc_equals_pairwise_concordance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    while done < 500 {
        let n = rng.random_range(2..=200);
        // coarse grids force plenty of tied scores
        let levels = [3, 10, 1000][rng.random_range(0..3)];
        let scores: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.4)))
            .collect();
        if scores.iter().all(|s| s.1) || scores.iter().all(|s| !s.1) {
            assert!(auc(&scores).is_err());
            continue;
        }
        let a = auc(&scores).unwrap();
        assert!((a - concordance(&scores)).abs() < 1e-9, "instance {done}");
        done += 1;
    }
}

fn small_config(seed: u64) -> Config {
    let cfg = Config {
        seed,
        n: 600,
        ..Config::default()
    };
    cfg.validate().unwrap();
    cfg
}

fn random_decision(rng: &mut ChaCha8Rng, k: usize) -> ScreeningDecision {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let predicted = rng.random_range(0..k);
    ScreeningDecision {
        route: if rng.random_bool(0.5) {
            Route::SimpleRoute
        } else {
            Route::HardRoute
        },
        predicted_class: predicted,
        referable: predicted != 0,
        u_pred: 0.0,
        u_clamped: 0.0,
        u_norm: 0.0,
        threshold_used: 0.5,
        referable_score: 1.0 - probs[0],
        class_probs: probs,
    }
}

#[test]
fn hard_counts_are_a_restriction_of_whole_counts() {
    let cfg = small_config(5);
    let (records, _) = simulate(&cfg).unwrap();
    let refs: Vec<_> = records.iter().collect();
    let k = cfg.generator.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let decisions: Vec<_> = refs.iter().map(|_| random_decision(&mut rng, k)).collect();
    let setup = eval_setup(&cfg);

    let whole = evaluate(&refs, &decisions, Group::WholeSet, &setup).unwrap();
    let hard = evaluate(&refs, &decisions, Group::HardOnly, &setup).unwrap();

    let mut expected = ConfusionCounts::new(k);
    let mut rest = ConfusionCounts::new(k);
    for (r, d) in refs.iter().zip(&decisions) {
        let truth = majority_label(&r.votes).class_index;
        if r.u.0 > setup.u_threshold {
            expected.add(truth, d.predicted_class);
        } else {
            rest.add(truth, d.predicted_class);
        }
    }
    assert_eq!(hard.confusion.matrix, expected.matrix);
    assert_eq!(whole.n, hard.n + rest.total() as usize);
    for i in 0..k {
        for j in 0..k {
            assert!(hard.confusion.matrix[i][j] <= whole.confusion.matrix[i][j]);
        }
    }

    for rep in [&whole, &hard] {
        let acc = rep.confusion.trace() as f64 / rep.n as f64;
        assert_eq!(rep.accuracy, Some(acc));
        let rates = [rep.accuracy, rep.sensitivity, rep.specificity, rep.auc];
        for r in rates.into_iter().flatten().chain(rep.f1.iter().copied()) {
            assert!((0.0..=1.0).contains(&r));
        }
        let counted: usize = rep.buckets.iter().map(|b| b.count).sum();
        assert_eq!(counted, rep.n);
    }
}

proptest! {
    #[test]
    fn f1_follows_a_class_relabelling(
        cells in prop::collection::vec(0u64..40, 16),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let k = 4;
        let m: Vec<Vec<u64>> = cells.chunks(k).map(|c| c.to_vec()).collect();
        let mut pm = vec![vec![0u64; k]; k];
        for i in 0..k {
            for j in 0..k {
                pm[perm[i]][perm[j]] = m[i][j];
            }
        }
        let f = f1_per_class(&ConfusionCounts::from_matrix(m).unwrap());
        let pf = f1_per_class(&ConfusionCounts::from_matrix(pm).unwrap());
        for c in 0..k {
            prop_assert_eq!(f[c], pf[perm[c]]);
        }
    }
}

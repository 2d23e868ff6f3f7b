use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uncscreen::streams::sha256_file;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uncscreen"));
    c.env_remove("UNCSCREEN_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, format!("# small and fast\nn = 900\nepochs = 8\n{extra}")).unwrap();
    p
}

/// simulate, train and eval into `dir`.
fn pipeline(dir: &Path, cfg: &Path, seed: &str) {
    let data = dir.join("data.jsonl");
    ok(&["simulate", "--config", s(cfg), "--out", s(&data), "--seed", seed]);
    ok(&[
        "train",
        s(&data),
        "--config",
        s(cfg),
        "--out",
        s(&dir.join("bundle")),
        "--seed",
        seed,
    ]);
    ok(&[
        "eval",
        s(&dir.join("bundle")),
        s(&data),
        "--config",
        s(cfg),
        "--out",
        s(&dir.join("report")),
    ]);
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir(d).unwrap();
        pipeline(d, &cfg, "13");
    }
    let mut compared = 0;
    for sub in ["", "bundle", "report"] {
        for fa in files(&a.join(sub)) {
            let name = fa.file_name().unwrap().to_str().unwrap().to_string();
            if fa.is_dir() || name.contains("run_manifest") {
                continue;
            }
            let fb = b.join(sub).join(&name);
            assert_eq!(
                std::fs::read(&fa).unwrap(),
                std::fs::read(&fb).unwrap(),
                "{sub}/{name} differs"
            );
            compared += 1;
        }
    }
    // dataset, metadata, 3 weights, bundle.json, 3 logs, config, 4 reports
    assert_eq!(compared, 14);

    for name in ["us_net.json", "sc_net.json", "hc_net.json", "bundle.json"] {
        assert!(a.join("bundle").join(name).exists());
    }
}

#[test]
fn run_manifest_hashes_match_outputs_and_inputs_are_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data.jsonl");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data), "--seed", "4"]);
    let before = sha256_file(&data).unwrap();
    let bundle = tmp.path().join("bundle");
    ok(&["train", s(&data), "--config", s(&cfg), "--out", s(&bundle)]);
    ok(&[
        "eval",
        s(&bundle),
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(sha256_file(&data).unwrap(), before);

    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(bundle.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["inputs"][0]["sha256"], before);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 8);
    for o in outputs {
        let p = PathBuf::from(o["path"].as_str().unwrap());
        assert_eq!(o["sha256"].as_str().unwrap(), sha256_file(&p).unwrap());
    }
    assert!(m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .all(|st| st["seconds"].as_f64().unwrap() >= 0.0));
    assert!(m["seeds"]["stream.hc"].as_u64().is_some());
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn eval_groups_partition_the_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    pipeline(tmp.path(), &cfg, "21");
    let both = read_csv(&tmp.path().join("report/report.csv"));
    assert_eq!(both.len(), 3);
    let n = |row: &Vec<String>| row[1].parse::<usize>().unwrap();
    let (whole, hard) = (n(&both[1]), n(&both[2]));

    let records = uncscreen::datagen::read_dataset(&tmp.path().join("data.jsonl"), 3).unwrap();
    let test: Vec<_> = records
        .iter()
        .filter(|r| r.split == uncscreen::datagen::Split::Test)
        .collect();
    let simple = test.iter().filter(|r| r.u.0 <= 0.25).count();
    assert_eq!(whole, test.len());
    assert_eq!(whole, hard + simple);

    for row in &both[1..] {
        for cell in &row[2..row.len() - 4] {
            if cell != "NA" {
                let v: f64 = cell.parse().unwrap();
                assert!((0.0..=1.0).contains(&v), "{cell}");
            }
        }
    }

    let out = tmp.path().join("hard_only");
    ok(&[
        "eval",
        s(&tmp.path().join("bundle")),
        s(&tmp.path().join("data.jsonl")),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--group",
        "hard",
    ]);
    let rows = read_csv(&out.join("report.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][0], "hard");
    assert_eq!(rows[1], both[2]);
}

#[test]
fn ablation_table_shape_and_m1_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data.jsonl");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data), "--seed", "5"]);
    ok(&[
        "ablate",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("abl")),
        "--seed",
        "5",
    ]);
    let table = read_csv(&tmp.path().join("abl/ablation.csv"));
    assert_eq!(
        table[0],
        ["group", "variant", "f1_class0", "f1_class1", "f1_class2", "overall"]
    );
    assert_eq!(table.len(), 1 + 4 * 2);
    for m in ["m1", "m2", "m3", "m4"] {
        assert!(tmp.path().join(format!("abl/report_{m}.csv")).exists());
    }

    // the M1 row is the plain one-hot cross-entropy hard-case stream
    let bundle = tmp.path().join("m1");
    ok(&[
        "train",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&bundle),
        "--seed",
        "5",
        "--variant",
        "m1",
    ]);
    ok(&[
        "eval",
        s(&bundle),
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("m1r")),
    ]);
    let report = read_csv(&tmp.path().join("m1r/report.csv"));
    for (row, rep) in [(&table[1], &report[1]), (&table[5], &report[2])] {
        assert_eq!(row[1], "M1");
        assert_eq!(row[0], rep[0]);
        assert_eq!(row[2..5], rep[6..9]);
        assert_eq!(row[5], rep[2]);
    }
}

#[test]
fn no_hard_cases_gives_an_sc_only_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "ambiguity_scale = 0\ngrader_skill_min = 1\ngrader_skill_max = 1\n",
    );
    let data = tmp.path().join("data.jsonl");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let bundle = tmp.path().join("bundle");
    let out = ok(&["train", s(&data), "--config", s(&cfg), "--out", s(&bundle)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("SC-only"));
    assert!(!bundle.join("hc_net.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(bundle.join("bundle.json")).unwrap()).unwrap();
    assert_eq!(manifest["sc_only"], true);
    ok(&[
        "eval",
        s(&bundle),
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("r")),
    ]);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 3\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["simulate", "--config", s(&bad), "--out", s(&tmp.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(run(&["simulate"]).status.code(), Some(1));
    assert_eq!(
        run(&["ablate", "d", "--out", "o", "--variant", "m9"]).status.code(),
        Some(1)
    );

    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data.jsonl");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let out = run(&[
        "eval",
        s(&tmp.path().join("nothing")),
        s(&data),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let garbled = tmp.path().join("garbled.jsonl");
    std::fs::write(&garbled, "{\"id\": 1}\n").unwrap();
    let out = run(&["train", s(&garbled), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));

    let k4 = tmp.path().join("k4.cfg");
    std::fs::write(&k4, "num_classes = 4\n").unwrap();
    let out = run(&[
        "train",
        s(&data),
        "--config",
        s(&k4),
        "--out",
        s(&tmp.path().join("b4")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_five_passing_losses_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(&["gradcheck", "--out", s(&tmp.path().join("a"))]);
    let b = ok(&["gradcheck", "--out", s(&tmp.path().join("b"))]);
    assert_eq!(a.stdout, b.stdout);
    let rows = read_csv(&tmp.path().join("a/gradcheck.csv"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["mse", "cross_entropy", "ugf", "ufd", "joint"]);
    assert!(rows[1..].iter().all(|r| r[3] == "true"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wbr::data::{write_feature_file, LabeledDataset};
use wbr::linalg::DenseMatrix;
use wbr::metrics::mean_std;
use wbr::trainer::RunRecord;

fn wbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wbr"))
        .args(args)
        .env_remove("WBR_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn mnist_dir() -> PathBuf {
    match std::env::var_os("WBR_DATA_DIR") {
        Some(root) => PathBuf::from(root).join("mnist"),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Config for the synthetic feature fixture, with `extra` appended to the top level.
fn feature_config(dir: &Path, name: &str, method: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"method = "{method}"
seeds = [0, 1, 2]
output_dir = {out:?}
{extra}
[dataset]
kind = "features"
train = {train:?}
test = {test:?}

[scenario]
increment = 2
"#,
        out = dir.join(name),
        train = fixture("blobs_train.wbrf"),
        test = fixture("blobs_test.wbrf"),
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn with_train(path: &Path, train: &str) {
    let mut s = fs::read_to_string(path).unwrap();
    s.push_str("\n[train]\n");
    s.push_str(train);
    fs::write(path, s).unwrap();
}

fn record(dir: &Path, seed: u64) -> RunRecord {
    let text = fs::read_to_string(dir.join(format!("seed-{seed}/record.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Final `A_b` of a per-stage CSV, as written (two decimals).
fn final_from_csv(path: &Path) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let last = text.lines().last().unwrap();
    last.split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn missing_feature_path_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "method = \"wbr\"\noutput_dir = \"x\"\n[dataset]\nkind = \"features\"\ntest = \"t.wbrf\"\n",
    )
    .unwrap();
    let o = wbr(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("dataset.train"), "{}", stderr(&o));
}

#[test]
fn missing_mnist_dir_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "method = \"wbr\"\noutput_dir = \"x\"\n[dataset]\nkind = \"mnist\"\n",
    )
    .unwrap();
    let o = wbr(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.dir"), "{}", stderr(&o));

    fs::write(
        &cfg,
        format!(
            "method = \"wbr\"\noutput_dir = \"x\"\n[dataset]\nkind = \"mnist\"\ndir = {:?}\n",
            tmp.path()
        ),
    )
    .unwrap();
    let o = wbr(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("train-images-idx3-ubyte"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_keys_and_bad_values_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = feature_config(tmp.path(), "run", "wbr", "");
    let path = cfg.to_str().unwrap();
    let o = wbr(&["run", "--config", path, "--set", "train.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = wbr(&["run", "--config", path, "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn run_writes_records_and_the_echo_reproduces_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = feature_config(tmp.path(), "run", "wbr", "");
    with_train(
        &cfg,
        "lr = 0.1\nclip_new = { mode = \"global-l2-norm\", threshold = 0.5 }\n",
    );
    let o = wbr(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = tmp.path().join("run");
    for seed in 0..3 {
        for f in ["record.json", "stages.csv", "memory.wbrf"] {
            assert!(out.join(format!("seed-{seed}/{f}")).is_file(), "{f}");
        }
    }
    let csv = fs::read_to_string(out.join("seed-0/stages.csv")).unwrap();
    assert!(csv.starts_with("stage,A_b,new_task_acc,seen_classes,wall_ms\n"));
    assert_eq!(csv.lines().count(), 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("seed,A_B,A_bar\n0,"));

    let echo = out.join("config.toml");
    let echoed = fs::read_to_string(&echo).unwrap();
    assert!(echoed.contains("threshold = 0.5") && echoed.contains("lr = 0.1"));
    let again = tmp.path().join("again");
    let o = wbr(&[
        "run",
        "--config",
        echo.to_str().unwrap(),
        "--set",
        &format!("output_dir={}", again.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in 0..3 {
        let (a, b) = (record(&out, seed), record(&again, seed));
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.config, b.config);
    }
}

#[test]
fn single_cell_grid_equals_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = feature_config(tmp.path(), "run", "wbr", "");
    let o = wbr(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid_out = tmp.path().join("grid");
    let o = wbr(&[
        "grid",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "lr=0.01",
        "--set",
        &format!("output_dir={}", grid_out.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cells: Vec<PathBuf> = fs::read_dir(&grid_out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(cells.len(), 1);
    for seed in 0..3 {
        let (a, b) = (
            record(&tmp.path().join("run"), seed),
            record(&cells[0], seed),
        );
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn grid_aggregates_match_per_seed_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = feature_config(tmp.path(), "grid", "wbr", "");
    let o = wbr(&[
        "grid",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "lr=0.1,0.01",
        "--axis",
        "alpha=none,0.5",
        "--jobs",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("grid");
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(
        lines.next().unwrap(),
        "cell,lr,alpha,seeds,A_B_mean,A_B_std,A_bar_mean,A_bar_std"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let coords: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[2])).collect();
    assert_eq!(
        coords,
        [
            ("0.1", "none"),
            ("0.1", "0.5"),
            ("0.01", "none"),
            ("0.01", "0.5")
        ]
    );
    for r in &rows {
        let cell = out.join(format!("cell-{}", r[0]));
        let finals: Vec<f64> = (0..3)
            .map(|s| final_from_csv(&cell.join(format!("seed-{s}/stages.csv"))))
            .collect();
        let (m, s) = mean_std(&finals).unwrap();
        let (gm, gs): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        // The CSVs carry two decimals; the grid aggregates full precision.
        assert!((m - gm).abs() <= 0.005 + 1e-4, "mean {m} vs {gm}");
        assert!((s - gs).abs() <= 0.01, "std {s} vs {gs}");
    }
    let md = fs::read_to_string(out.join("grid.md")).unwrap();
    assert!(md.starts_with("| Method | lr | Network | α | β | A_B | Ā |"));
    assert_eq!(md.lines().count(), 6);
    assert!(md.contains("| not set |"));
}

#[test]
fn empty_axis_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = feature_config(tmp.path(), "grid", "wbr", "");
    let o = wbr(&["grid", "--config", cfg.to_str().unwrap(), "--axis", "lr="]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn report_deltas_and_comparability() {
    let tmp = tempfile::tempdir().unwrap();
    let wbr_cfg = feature_config(tmp.path(), "wbr-run", "wbr", "");
    with_train(
        &wbr_cfg,
        "lr = 0.1\nclip_new = { mode = \"global-l2-norm\", threshold = 0.5 }\n",
    );
    let simple_cfg = feature_config(tmp.path(), "simplecil", "simplecil", "");
    for c in [&wbr_cfg, &simple_cfg] {
        let o = wbr(&["run", "--config", c.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (w, s) = (tmp.path().join("wbr-run"), tmp.path().join("simplecil"));
    let out = tmp.path().join("report");
    let o = wbr(&[
        "report",
        w.to_str().unwrap(),
        "--baseline",
        s.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.lines().next().unwrap().contains("ΔA_B"));
    let simple_mean = 100.0;
    let wbr_mean: f64 = (0..3).map(|k| record(&w, k).final_accuracy).sum::<f64>() / 3.0;
    let expected = format!("{:+.2}", wbr_mean - simple_mean);
    let row = md.lines().find(|l| l.starts_with("| wbr-run")).unwrap();
    assert!(row.contains(&expected), "{row} lacks {expected}");
    assert!(md.contains("| simplecil | SimpleCIL | 3 | 100.00 ±0.00"));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 3);

    let one = tmp.path().join("one");
    let o = wbr(&[
        "report",
        w.to_str().unwrap(),
        "--out",
        one.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("Δ"));
    assert!(!fs::read_to_string(one.join("report.csv"))
        .unwrap()
        .contains("delta"));

    let shuffled = feature_config(tmp.path(), "shuffled", "simplecil", "");
    let mut text = fs::read_to_string(&shuffled).unwrap();
    text.push_str("order_seed = 5\n");
    fs::write(&shuffled, text).unwrap();
    let o = wbr(&["run", "--config", shuffled.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = wbr(&[
        "report",
        w.to_str().unwrap(),
        tmp.path().join("shuffled").to_str().unwrap(),
        "--out",
        one.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("class orders"), "{}", stderr(&o));
}

#[test]
fn footprint_of_a_stored_memory() {
    let tmp = tempfile::tempdir().unwrap();
    for (n, expected) in [(95u32, "23.75"), (90, "22.50")] {
        let features = DenseMatrix::zeros(n as usize, 768);
        let ds = LabeledDataset::new(features, (0..n).collect(), 100).unwrap();
        let path = tmp.path().join(format!("store{n}.wbrf"));
        write_feature_file(&path, &ds).unwrap();
        let o = wbr(&[
            "footprint",
            "--store",
            path.to_str().unwrap(),
            "--sample",
            "32x32x3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(
            stdout(&o).contains(&format!("= {expected} samples")),
            "{}",
            stdout(&o)
        );
    }
    let o = wbr(&["footprint", "--store", "nope.wbrf", "--sample", "32x32"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mnist_finetune_forgets() {
    let dir = mnist_dir();
    assert!(
        dir.join("train-images-idx3-ubyte").is_file(),
        "MNIST not found under {}; run scripts/fetch_mnist.sh or set WBR_DATA_DIR",
        dir.display()
    );
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ft");
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_finetune.toml");
    let o = wbr(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        &format!("dataset.dir={}", dir.display()),
        "--set",
        &format!("output_dir={}", out.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a_b = final_from_csv(&out.join("seed-0/stages.csv"));
    assert!(a_b < 25.0, "A_B {a_b}");
}

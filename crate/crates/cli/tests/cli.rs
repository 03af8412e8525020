//! End-to-end runs of the `bnn` binary on a small synthetic IDX dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnn_core::io::{read_checkpoint, write_idx, LAYER_NAMES_FILE};
use bnn_core::layers::presets::bnn_fc;
use bnn_core::prune::PruneReport;
use bnn_core::train::init_rng;
use bnn_core::InitConfig;

/// `n` 28×28 images whose label `l` lights rows `2l..2l+3` over hashed noise.
fn write_split(dir: &Path, prefix: &str, n: usize) {
    let mut pixels = vec![0u8; n * 784];
    let labels: Vec<u8> = (0..n).map(|i| ((i * 7 + 3) % 10) as u8).collect();
    for (i, &l) in labels.iter().enumerate() {
        for p in 0..784 {
            let h = (i * 784 + p).wrapping_mul(2_654_435_761) >> 7;
            let row = p / 28;
            pixels[i * 784 + p] = if row >= 2 * l as usize && row < 2 * l as usize + 3 { 200 } else { (h % 60) as u8 };
        }
    }
    write_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")), &[n, 28, 28], &pixels, true).unwrap();
    write_idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &[n], &labels, false).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    std::fs::create_dir_all(&data).unwrap();
    write_split(&data, "train", 400);
    write_split(&data, "t10k", 60);
    Fixture {
        root: tmp.path().to_path_buf(),
        data,
        _tmp: tmp,
    }
}

impl Fixture {
    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Runs `bnn <args>` with the fixture data and `--out-dir <out>`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bnn"));
        cmd.args(args).arg("--data-dir").arg(&self.data).arg("--out-dir").arg(self.out(out));
        cmd.env_remove("BNN_MNIST_DIR");
        cmd.output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) {
        let o = self.run(out, args);
        assert!(o.status.success(), "bnn {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    }
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnn"))
        .args(args)
        .env_remove("BNN_MNIST_DIR")
        .output()
        .unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SMALL: [&str; 6] = ["--n-train", "300", "--epochs", "1", "--batch", "50"];

#[test]
fn usage_errors_exit_with_two_and_name_the_field() {
    let o = bare(&["train", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data-dir"));
    let o = bare(&["train", "--data-dir", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data-dir"));
    assert_eq!(bare(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(bare(&["train", "--batch", "0"]).status.code(), Some(2));

    let f = fixture();
    let cfg = f.out("bad.toml");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = f.run("x", &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = f.run("empty", &["infer"]);
    assert_eq!(o.status.code(), Some(2), "no checkpoint to infer from");
}

#[test]
fn zero_epochs_write_the_initialized_model() {
    let f = fixture();
    f.ok("init", &["train", "--epochs", "0", "--seed", "3"]);
    let dir = f.out("init");
    assert_eq!(read(dir.join("metrics.csv")).trim(), "epoch,nll,kl,beta,total,train_accuracy,wall_seconds");
    let ck = read_checkpoint::<f32>(&dir.join("model-0.ckpt")).unwrap();
    let mut want = bnn_fc::<f32>();
    want.init_params(&mut init_rng(3), &InitConfig::default()).unwrap();
    assert_eq!(ck.graph, want);
    assert!(dir.join(LAYER_NAMES_FILE).exists() && dir.join("OpsNames.txt").exists());
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let f = fixture();
    for out in ["a", "b"] {
        f.ok(out, &[&["train", "--seed", "9"][..], &SMALL].concat());
        f.ok(out, &["infer", "--samples", "4", "--seed", "9"]);
    }
    let (a, b) = (f.out("a"), f.out("b"));
    assert_eq!(std::fs::read(a.join("model-6.ckpt")).unwrap(), std::fs::read(b.join("model-6.ckpt")).unwrap());
    for file in ["predictive.csv", "histograms.csv"] {
        assert_eq!(read(a.join(file)), read(b.join(file)), "{file}");
    }
    let rows = read(a.join("predictive.csv")).lines().count();
    assert_eq!(rows, 1 + 60 * 10);
}

#[test]
fn single_sample_of_a_frozen_scale_model_gives_a_stable_argmax() {
    let f = fixture();
    f.ok("frozen", &[&["train", "--freeze-scale"][..], &SMALL].concat());
    let argmax = |seed: &str| {
        f.ok("frozen", &["infer", "--samples", "1", "--seed", seed]);
        read(f.out("frozen").join("predictive.csv"))
            .lines()
            .map(|l| l.rsplit(',').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(argmax("1"), argmax("2"));
}

#[test]
fn prune_defaults_to_threshold_ten_and_sweep_has_a_row_per_percent() {
    let f = fixture();
    f.ok("m", &[&["train"][..], &SMALL].concat());
    f.ok("m", &["prune", "--samples", "2"]);
    let report = PruneReport::read(&f.out("m").join("prune_report.bprn")).unwrap();
    assert_eq!(report.threshold, 10.0);
    assert_eq!(report.predictive.n_samples, 2);
    let pruned = read_checkpoint::<f32>(&f.out("m").join("pruned/model-6.ckpt")).unwrap();
    assert_eq!(pruned.graph.kept_weight_count() as u64, report.total_nnz);

    f.ok("m", &["prune", "--samples", "1", "--threshold", "0"]);
    let all = PruneReport::read(&f.out("m").join("prune_report.bprn")).unwrap();
    assert_eq!(all.total_nnz, bnn_fc::<f32>().variational_weight_count() as u64);

    f.ok("m", &["sweep", "--samples", "2", "--percents", "0,20,40,60,80,90"]);
    let sweep = read(f.out("m").join("sweep.csv"));
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "pct,threshold,accuracy,nnz_total,runtime_s");
    assert_eq!(lines.len(), 7);
    let pcts: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(pcts, ["0", "20", "40", "60", "80", "90"]);
}

#[test]
fn inconsistent_manifest_is_a_runtime_error() {
    let f = fixture();
    f.ok("m", &["train", "--epochs", "0"]);
    let names = f.out("m").join(LAYER_NAMES_FILE);
    let edited = read(names.clone()).replace("den_2/kernel", "den_9/kernel");
    std::fs::write(&names, edited).unwrap();
    let o = f.run("m", &["infer", "--samples", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn distributed_training_matches_across_transports() {
    let f = fixture();
    let args = ["--n-train", "200", "--epochs", "1", "--batch", "25", "--workers", "2", "--shared-noise"];
    f.ok("chan", &[&["dist-train"][..], &args].concat());
    f.ok("tcp", &[&["dist-train", "--transport", "tcp"][..], &args].concat());
    let ck = |d: &str| std::fs::read(f.out(d).join("model-4.ckpt")).unwrap();
    assert_eq!(ck("chan"), ck("tcp"));
    assert_eq!(read(f.out("chan").join("reductions.csv")), "kernel,scale,bias,variational,total\n3,3,3,6,9\n");
    f.ok("via-train", &[&["train"][..], &args].concat());
    assert_eq!(ck("via-train"), ck("chan"));

    f.ok("scale", &["dist-train", "--n-train", "100", "--epochs", "1", "--batch", "25", "--scaling", "1,2"]);
    let summary = read(f.out("scale").join("scaling_summary.csv"));
    assert_eq!(summary.lines().count(), 3);
    assert!(read(f.out("scale").join("scaling.csv")).starts_with("world,rank,epoch,"));
}

#[test]
fn bench_checksums_ignore_transport_and_fusion() {
    let f = fixture();
    let sizes = ["--sizes", "1024,8192,65536", "--reps", "2"];
    f.ok("w1", &[&["bench-allreduce", "--workers", "1"][..], &sizes].concat());
    f.ok("f64", &[&["bench-allreduce", "--workers", "3", "--fusion-mb", "64"][..], &sizes].concat());
    f.ok("f1", &[&["bench-allreduce", "--workers", "3", "--fusion-mb", "0.0625"][..], &sizes].concat());
    let checksums = |d: &str| {
        read(f.out(d).join("bench_allreduce.csv"))
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                (c[0].to_string(), c[2].to_string(), c[9].to_string())
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (checksums("f64"), checksums("f1"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(a[..3].iter().map(|r| &r.2).collect::<Vec<_>>(), a[3..].iter().map(|r| &r.2).collect::<Vec<_>>());
    for t in ["channel", "tcp"] {
        let stats = read(f.out("f64").join(format!("comm_stats_{t}.csv")));
        let calls = stats.lines().find(|l| l.starts_with("allreduce,")).unwrap().split(',').nth(1).unwrap().to_string();
        assert_eq!(calls, "6", "{t}: 3 sizes × 2 repetitions");
    }
    assert_eq!(checksums("w1").len(), 6);
    let o = f.run("big", &["bench-allreduce", "--sizes", "2097152", "--fusion-mb", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

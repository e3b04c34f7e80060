//! End-to-end runs of the `ddvi` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.enc_hidden=8
model.dec_hidden=8
model.eps_width=8
model.eps_layers=2
data.n=120
data.test=40
data.kind=continuous
diffusion.steps=4
train.batch=40
train.epochs=2
train.log_every=1
train.pretrain_iters=2
eval.diff_samples=4
eval.prior_samples=50
eval.mmd_samples=20
prior.kde_points=100
";

fn ddvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddvi"))
        .args(args)
        .env("DDVI_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn train(dir: &Path, cfg: &str, out: &str) -> Output {
    ddvi(&["train", "--config", cfg, "--out", dir.join(out).to_str().unwrap(), "--seed", "3"])
}

#[test]
fn train_is_reproducible_and_eval_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = train(tmp.path(), &cfg, "a");
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = train(tmp.path(), &cfg, "b");
    assert!(b.status.success());
    for f in ["metrics.tsv", "checkpoint.bin", "report.txt"] {
        let fa = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let fb = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(fa, fb, "{f} differs between identical runs");
    }
    let log = std::fs::read_to_string(tmp.path().join("a/metrics.tsv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step\trec\treg\tdiff\ttotal\twallclock_ms");
    assert_eq!(log.lines().count(), 1 + 2 * 2);
    assert!(log.lines().skip(1).all(|l| l.split('\t').count() == 6 && l.ends_with("\t0")));

    let out = tmp.path().join("a");
    let e = ddvi(&["eval", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let trained = ddvi::metrics::EvalReport::parse(&std::fs::read_to_string(out.join("report.txt")).unwrap()).unwrap();
    let evaluated = ddvi::metrics::EvalReport::parse(&String::from_utf8(e.stdout).unwrap()).unwrap();
    for (a, b) in [(trained.elbo, evaluated.elbo), (trained.latent_nll, evaluated.latent_nll), (trained.mmd, evaluated.mmd)] {
        assert!((a.unwrap() - b.unwrap()).abs() <= 1e-9);
    }
    assert_eq!(trained.knn_acc, evaluated.knn_acc);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.epochs=0\n");
    let r = train(tmp.path(), &cfg, "z");
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dir = tmp.path().join("z");
    assert!(dir.join("checkpoint.bin").exists());
    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    let keys: Vec<&str> = report.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ddvi::metrics::EvalReport::KEYS);
    assert!(report.contains("nmi=na"));
    assert_eq!(std::fs::read_to_string(dir.join("metrics.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn eval_with_mismatched_width_lists_shape_diffs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.epochs=0\n");
    assert!(train(tmp.path(), &cfg, "m").status.success());
    let ck = tmp.path().join("m/checkpoint.bin");
    let wide = write_config(tmp.path(), "train.epochs=0\nmodel.enc_hidden=9\n");
    let e = ddvi(&["eval", "--config", &wide, "--checkpoint", ck.to_str().unwrap(), "--out", tmp.path().join("m2").to_str().unwrap()]);
    assert!(!e.status.success());
    let err = String::from_utf8_lossy(&e.stderr);
    assert!(err.contains("enc.h0.w") && err.contains("enc.h0.w: expected 32x9, checkpoint has 32x8"), "{err}");
}

#[test]
fn error_paths_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "train.lrr=0.01\n").unwrap();
    let r = ddvi(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.lrr"));

    let missing = ddvi(&["train", "--config", "/nonexistent/x.cfg"]);
    assert!(!missing.status.success());

    let csv = tmp.path().join("d.cfg");
    std::fs::write(&csv, "data.source=csv\ndata.csv=/nonexistent.csv\n").unwrap();
    assert!(!ddvi(&["train", "--config", csv.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]).status.success());

    assert!(!ddvi(&["train", "--profile", "nope"]).status.success());
}

#[test]
fn plotting_and_dumps_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.epochs=1\n");
    assert!(train(tmp.path(), &cfg, "p").status.success());
    let out = tmp.path().join("p");
    let plot = || {
        let r = ddvi(&["plot-latents", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        std::fs::read(out.join("latents.svg")).unwrap()
    };
    let svg = plot();
    assert_eq!(svg, plot());
    let text = String::from_utf8(svg).unwrap();
    assert_eq!(text.matches("<circle").count(), 40);

    let s = ddvi(&["sample-prior", "--config", &cfg, "--n", "64", "--out", out.to_str().unwrap()]);
    assert!(s.status.success());
    let rows = std::fs::read_to_string(out.join("prior_samples.csv")).unwrap();
    assert_eq!(rows.lines().count(), 64);
    assert!(out.join("prior_samples.svg").exists());

    let m = ddvi(&["make-synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(m.status.success());
    let synth = std::fs::read_to_string(out.join("synth.csv")).unwrap();
    assert_eq!(synth.lines().count(), 120);
    assert_eq!(synth.lines().next().unwrap().split(',').count(), 33);
}

#[test]
fn profiles_and_flags_layer_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.epochs=0\n");
    let r = ddvi(&[
        "train", "--profile", "aevb", "--config", &cfg, "--set", "train.kl_max=0.02",
        "--out", tmp.path().join("l").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dump = std::fs::read_to_string(tmp.path().join("l/config.txt")).unwrap();
    let line = |k: &str| dump.lines().find(|l| l.starts_with(&format!("{k}="))).unwrap().to_string();
    assert!(line("mode").contains("aevb") && line("mode").contains("profile"));
    assert!(line("train.epochs").starts_with("train.epochs=0") && line("train.epochs").contains("file"));
    assert!(line("train.kl_max").starts_with("train.kl_max=0.02") && line("train.kl_max").contains("flag"));
}

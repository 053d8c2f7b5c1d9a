use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sciflow::io::{read_png_rgb, write_flo, write_png_rgb, RgbImage};
use sciflow::FlowField;

const TINY: &str = "\
# small enough for a quick run
model.feature_channels=8
model.hidden_channels=8
model.correlation_radius=1
model.iterations=2
model.downsample_factor=2
data.width=8
data.height=8
data.max_displacement=2
data.count=16
eval.count=4
eval.every=2
optim.batch=2
optim.steps=3
";

fn sciflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sciflow"))
        .args(args)
        .env("SCIFLOW_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn zero_step_training_writes_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = sciflow(
        &["train", "--config", cfg.to_str().unwrap(), "--variant", "baseline", "--steps", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("baseline_seed0");
    for f in ["checkpoint.bin", "config.txt", "metrics.log", "report.txt", "report.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let saved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("optim.steps=0"));
}

#[test]
fn repeated_runs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let o = sciflow(
            &["train", "--config", cfg.to_str().unwrap(), "--variant", "sci", "--run-name", name],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(fs::read(dir.path().join(name).join("metrics.log")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let text = String::from_utf8(logs.remove(0)).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("step=")).count() >= 3);
}

#[test]
fn full_combination_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = sciflow(
        &[
            "train", "--config", cfg.to_str().unwrap(), "--variant", "sci_rfl", "--loss-variant", "d", "--alpha", "1",
            "--beta", "1",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sci_rfl_seed0/checkpoint.bin").is_file());
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    for extra in [
        vec!["--set", "model.iterations=0"],
        vec!["--set", "no.such.key=1"],
        vec!["--loss-variant", "e"],
        vec!["--variant", "nonsense"],
    ] {
        let mut args = vec!["train", "--config", c];
        args.extend(extra.iter().copied());
        let o = sciflow(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{extra:?}");
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(sciflow(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = sciflow(
        &["train", "--config", cfg.to_str().unwrap(), "--lr", "1e300", "--set", "optim.clip_norm=0", "--steps", "5"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_of_identical_flows_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.flo");
    let u: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
    write_flo(&p, &FlowField::from_planes(4, 3, &u, &u, None).unwrap()).unwrap();
    let ps = p.to_str().unwrap();
    let o = sciflow(&["eval", "--pred", ps, "--gt", ps], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("EPE 0.00"), "{out}");
    assert!(out.contains("Fl-all 0.00%"), "{out}");
}

#[test]
fn eval_of_checkpoint_on_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(sciflow(&["train", "--config", c, "--steps", "1"], dir.path()).status.code(), Some(0));
    let ckpt = dir.path().join("baseline_seed0/checkpoint.bin");
    let run = |name: &str| {
        let o = sciflow(
            &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", c, "--run-name", name],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join(name).join("metrics.log")).unwrap()
    };
    let first = run("e1");
    assert_eq!(first, run("e2"));
    assert!(String::from_utf8(first).unwrap().contains("epe_iter_2="));
}

#[test]
fn infer_dumps_one_png_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = sciflow(
        &["train", "--config", cfg.to_str().unwrap(), "--steps", "0", "--set", "model.iterations=6"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let i1 = dir.path().join("i1.png");
    let i2 = dir.path().join("i2.png");
    write_png_rgb(&i1, &RgbImage::filled(8, 8, [200, 10, 10])).unwrap();
    write_png_rgb(&i2, &RgbImage::filled(8, 8, [10, 200, 10])).unwrap();
    let out = dir.path().join("infer");
    let o = sciflow(
        &[
            "infer",
            "--checkpoint",
            dir.path().join("baseline_seed0/checkpoint.bin").to_str().unwrap(),
            "--image1",
            i1.to_str().unwrap(),
            "--image2",
            i2.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--dump-iterations",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("flow.flo").is_file());
    assert!(out.join("flow.png").is_file());
    let mut iters: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("iter_"))
        .collect();
    iters.sort();
    assert_eq!(iters, (1..=6).map(|i| format!("iter_{i:02}.png")).collect::<Vec<_>>());
}

#[test]
fn viz_of_zero_flow_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("zero.flo");
    write_flo(&p, &FlowField::<f64>::zeros(1, 5, 4)).unwrap();
    let out = dir.path().join("viz");
    let o = sciflow(
        &["viz", p.to_str().unwrap(), "--gt", p.to_str().unwrap(), "--output", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let img = read_png_rgb(out.join("flow.png")).unwrap();
    assert!(img.data.iter().all(|&c| c == 255));
    let err = read_png_rgb(out.join("error.png")).unwrap();
    assert!(err.data.iter().all(|&c| c == 0));
    let conf = read_png_rgb(out.join("confidence.png")).unwrap();
    assert!(conf.data.iter().all(|&c| c == 255));
}

#[test]
fn missing_and_malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("viz");
    let missing = dir.path().join("absent.flo");
    let o = sciflow(&["viz", missing.to_str().unwrap(), "--output", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.flo");
    fs::write(&bad, b"PIEH garbage").unwrap();
    let o = sciflow(&["viz", bad.to_str().unwrap(), "--output", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn ablation_writes_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = sciflow(
        &["ablate", "--config", cfg.to_str().unwrap(), "--steps", "1", "--seeds", "0,1", "--variant", "sci"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("ablation/ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.contains("loss_d_per_iteration"));
    assert!(dir.path().join("ablation/ablation.json").is_file());
}

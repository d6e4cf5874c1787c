use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plin_core::dataset::{load_depth, save_depth, save_flow};
use plin_core::{DepthKind, DepthMap, FlowField};

const SYNTH: &str = "seed = 3\ncount = 2\n[random]\nwidth = 32\nheight = 32\nsize = [6.0, 14.0]\n";
const TINY: &str = "[coarse]\nstage_widths = [6]\nblocks_per_stage = [2]\n[refine]\nencoder_widths = [4, 6, 6]\n";

fn plin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plin")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path) -> PathBuf {
    let config = dir.join("synth.toml");
    fs::write(&config, SYNTH).unwrap();
    let data = dir.join("data");
    ok(plin(&["synth", s(&config), "--out", s(&data)]));
    data
}

/// Parses the first data row of an eval CSV.
fn metrics(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "sample,rmse_mm,mae_mm,irmse_per_km,imae_per_km,valid_count");
    lines.next().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect()
}

fn ply_vertices(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let header = text.lines().find_map(|l| l.strip_prefix("element vertex ")).unwrap();
    let n: usize = header.parse().unwrap();
    let body = text.split("end_header\n").nth(1).unwrap();
    assert_eq!(body.lines().count(), n);
    n
}

#[test]
fn synth_flow_mid_interpolate_convert_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let sample = data.join("00000");
    let p = |n: &str| sample.join(n);
    let mid = dir.path().join("mid");
    ok(plin(&["flow-mid", s(&p("flow_fwd.flo")), s(&p("flow_bwd.flo")), "--out", s(&mid)]));

    let d_t = dir.path().join("d_t.png");
    let intrinsics = data.join("intrinsics.txt");
    ok(plin(&[
        "interpolate",
        s(&p("d_prev.png")),
        s(&p("d_next.png")),
        s(&mid.join("flow_to_prev.flo")),
        s(&mid.join("flow_to_next.flo")),
        "--intermediate",
        "--classical",
        "--ply",
        "--intrinsics",
        s(&intrinsics),
        "--out",
        s(&d_t),
    ]));
    let cloud = dir.path().join("cloud.ply");
    ok(plin(&["convert", s(&d_t), "--intrinsics", s(&intrinsics), "--out", s(&cloud)]));
    let valid = load_depth(&d_t).unwrap().valid_count();
    assert!(valid > 0);
    assert_eq!(ply_vertices(&cloud), valid);
    assert_eq!(fs::read(&cloud).unwrap(), fs::read(d_t.with_extension("ply")).unwrap());

    let out = ok(plin(&["eval", s(&d_t), s(&p("gt_dense.png"))]));
    let m = metrics(&String::from_utf8(out.stdout).unwrap());
    assert!(m.iter().all(|v| v.is_finite()));
    assert_eq!(m[4], valid as f64);
}

#[test]
fn cross_frame_flows_match_flow_mid_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let p = |n: &str| data.join("00001").join(n);
    let mid = dir.path().join("mid");
    ok(plin(&["flow-mid", s(&p("flow_fwd.flo")), s(&p("flow_bwd.flo")), "--out", s(&mid)]));
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let common = [s(&p("d_prev.png")).to_owned(), s(&p("d_next.png")).to_owned()];
    ok(plin(&["interpolate", &common[0], &common[1], s(&p("flow_fwd.flo")), s(&p("flow_bwd.flo")), "--classical", "--out", s(&a)]));
    ok(plin(&[
        "interpolate",
        &common[0],
        &common[1],
        s(&mid.join("flow_to_prev.flo")),
        s(&mid.join("flow_to_next.flo")),
        "--intermediate",
        "--classical",
        "--out",
        s(&b),
    ]));
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn eval_of_prediction_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let gt = data.join("00000/gt_dense.png");
    let out = ok(plin(&["eval", s(&gt), s(&gt)]));
    let m = metrics(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(&m[..4], &[0.0; 4]);
}

#[test]
fn directory_eval_reports_each_sample_and_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let pred = dir.path().join("pred");
    for sample in ["00000", "00001"] {
        fs::create_dir_all(pred.join(sample)).unwrap();
        fs::copy(data.join(sample).join("gt_dense.png"), pred.join(sample).join("gt_dense.png")).unwrap();
    }
    let csv = dir.path().join("metrics.csv");
    ok(plin(&["eval", s(&pred), s(&data), "--out", s(&csv)]));
    let text = fs::read_to_string(csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["00000/gt_dense.png", "00001/gt_dense.png", "mean"]);
    assert!(rows.iter().all(|r| r[1..5].iter().all(|v| v.parse::<f64>().unwrap() == 0.0)));
}

#[test]
fn static_scene_is_reproduced_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let depth = DepthMap::from_fn(9, 7, DepthKind::Sparse, |x, y| ((x + y) % 3 != 0).then(|| 1.0 + (x * 7 + y) as f64 / 8.0)).unwrap();
    let d = dir.path().join("d.png");
    let zero = dir.path().join("zero.flo");
    save_depth(&d, &depth).unwrap();
    save_flow(&zero, &FlowField::zeros(9, 7)).unwrap();
    let out = dir.path().join("out.png");
    ok(plin(&["interpolate", s(&d), s(&d), s(&zero), s(&zero), "--classical", "--out", s(&out)]));
    assert_eq!(load_depth(&out).unwrap(), load_depth(&d).unwrap());
}

#[test]
fn train_is_deterministic_and_drives_interpolation() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let manifest = data.join("manifest.txt");
    let train = |name: &str| {
        let ckpt = dir.path().join(name);
        ok(plin(&["train", s(&manifest), "--config", s(&config), "--epochs", "2", "--seed", "5", "--out", s(&ckpt)]));
        ckpt
    };
    let a = train("a.ckpt");
    let b = train("b.ckpt");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let trace = fs::read_to_string(a.with_extension("csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,epoch,coarse_loss,refined_loss,total,lr"));
    assert_eq!(trace.lines().count(), 1 + 2 * 2);

    // One more epoch on top of the first run equals a three-epoch run.
    let resumed = dir.path().join("resumed.ckpt");
    ok(plin(&["train", s(&manifest), "--checkpoint", s(&a), "--epochs", "3", "--seed", "5", "--out", s(&resumed)]));
    let direct = dir.path().join("direct.ckpt");
    ok(plin(&["train", s(&manifest), "--config", s(&config), "--epochs", "3", "--seed", "5", "--out", s(&direct)]));
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&direct).unwrap());

    let p = |n: &str| data.join("00000").join(n);
    let out = dir.path().join("net.png");
    ok(plin(&[
        "interpolate",
        s(&p("d_prev.png")),
        s(&p("d_next.png")),
        s(&p("flow_fwd.flo")),
        s(&p("flow_bwd.flo")),
        "--color",
        s(&p("color_t.png")),
        "--checkpoint",
        s(&a),
        "--ply",
        "--intrinsics",
        s(&data.join("intrinsics.txt")),
        "--out",
        s(&out),
    ]));
    assert_eq!(ply_vertices(&out.with_extension("ply")), load_depth(&out).unwrap().valid_count());
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (synth(a.path()), synth(b.path()));
    for f in ["manifest.txt", "intrinsics.txt", "00001/d_prev.png", "00001/flow_fwd.flo", "00001/color_t.png"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

fn assert_fails(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.trim().is_empty());
}

#[test]
fn missing_input_is_a_data_error() {
    let out = plin(&["convert", "/nonexistent/d.png", "--intrinsics", "/nonexistent/k.txt", "--out", "/tmp/x.ply"]);
    assert_fails(&out, 2);
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_fails(&plin(&["interpolate"]), 1);
    assert_fails(&plin(&["no-such-command"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    fs::write(&f, "").unwrap();
    assert_fails(&plin(&["interpolate", s(&f), s(&f), s(&f), s(&f), "--classical", "--gamma", "1.5", "--out", s(&f)]), 1);
    assert_fails(&plin(&["interpolate", s(&f), s(&f), s(&f), s(&f), "--out", s(&f)]), 1);
    assert_fails(&plin(&["eval", s(dir.path()), s(&f)]), 1);
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_plin"))
        .args(["eval", "a.png", "b.png"])
        .env("PLIN_THREADS", "0")
        .output()
        .unwrap();
    assert_fails(&out, 1);
}

#[test]
fn help_exits_zero() {
    assert!(plin(&["--help"]).status.success());
}

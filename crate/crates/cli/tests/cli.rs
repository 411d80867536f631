use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqsplat::data_io::load_dataset;
use freqsplat::objective::LossReport;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, scene: &str, size: usize, frames: usize) {
    let (w, f) = (size.to_string(), frames.to_string());
    let o = run(&["synth", scene, "--seed", "7", "--out", s(dir), "--width", &w, "--height", &w, "--frames", &f]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--static-iters",
        "12",
        "--deform-iters",
        "6",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_is_loadable_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = run(&["synth", "translating_blob", "--seed", "7", "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    run(&["synth", "translating_blob", "--seed", "7", "--out", s(&b)]);
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 8);
    assert!(ds.gt_flows.is_some());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn synth_unknown_scene_lists_names() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "spinning_top", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:"), "{err}");
    for name in ["static_texture", "translating_blob", "pulsating_sheet"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn train_writes_outputs_and_guards_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    synth(&data, "translating_blob", 24, 3);
    let o = train_small(&data, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.fqs", "config.toml", "losses.jsonl", "summary.json", "cloud.ply"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(!out.join(".freqsplat.lock").exists());
    let lines = fs::read_to_string(out.join("losses.jsonl")).unwrap();
    let reports: Vec<LossReport> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 18);
    assert_eq!(reports.last().unwrap().iteration, 18);

    let again = train_small(&data, &out, &[]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    let forced = train_small(&data, &out, &["--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
}

#[test]
fn invalid_config_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "static_texture", 16, 1);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "static_iters = 5\ndensify_treshold = 1.0\n").unwrap();
    let o = run(&["train", "--data", s(&data), "--out", s(&tmp.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("densify_treshold"), "{}", stderr(&o));
}

#[test]
fn lambda_shf_override_zeroes_the_term() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    synth(&data, "static_texture", 16, 1);
    let o = train_small(&data, &out, &["--lambda-shf", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(merged.contains("lambda_shf = 0.0"), "{merged}");
    for line in fs::read_to_string(out.join("losses.jsonl")).unwrap().lines() {
        let r: LossReport = serde_json::from_str(line).unwrap();
        let expect = r.l1 + 0.5 * r.depth + 0.1 * r.tv + 10.0 * r.thf;
        assert!((r.total - expect).abs() < 1e-9 * r.total.max(1.0));
    }
}

#[test]
fn render_eval_and_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    synth(&data, "translating_blob", 24, 3);
    assert!(train_small(&data, &out, &[]).status.success());
    let ckpt = out.join("checkpoint.fqs");

    let renders = tmp.path().join("renders");
    let o = run(&["render", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&renders), "--times", "0,0.5,0.77"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&renders).unwrap().count(), 3);

    let ev = tmp.path().join("eval");
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--flow", "--spectra"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let flows = fs::read_dir(ev.join("flow"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
        .count();
    assert_eq!(flows, 2);
    assert!(ev.join("spectra").join("highpass_0000.png").exists());
    assert_eq!(fs::read(renders.join("render_0000.png")).unwrap(), fs::read(ev.join("render_0000.png")).unwrap());
    let table = fs::read_to_string(ev.join("metrics.txt")).unwrap();
    let mean_line = table.lines().last().unwrap();
    let eval_psnr: f64 = mean_line.split('\t').nth(1).unwrap().parse().unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let train_psnr = summary["final_psnr"].as_f64().unwrap();
    assert!((eval_psnr - train_psnr).abs() < 0.01, "{eval_psnr} vs {train_psnr}");

    let corrupt = tmp.path().join("corrupt.fqs");
    fs::write(&corrupt, b"not a checkpoint at all").unwrap();
    let o = run(&["render", "--checkpoint", s(&corrupt), "--data", s(&data), "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    let other = tmp.path().join("other");
    synth(&other, "translating_blob", 32, 3);
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other), "--out", s(&tmp.path().join("e2"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("24x24"), "{}", stderr(&o));
}

#[test]
fn locked_output_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    synth(&data, "static_texture", 16, 1);
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".freqsplat.lock"), "1").unwrap();
    let o = train_small(&data, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn gradcheck_filter_and_injection() {
    let o = run(&["gradcheck", "--module", "shf"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains(" shf/")));
    assert!(!out.contains("rasterizer"));

    let o = run(&["gradcheck", "--module", "rasterizer", "--inject-sign-error", "rasterizer/log_scales"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("rasterizer/log_scales"), "{}", stderr(&o));
}

#[test]
fn default_gradcheck_passes() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
}

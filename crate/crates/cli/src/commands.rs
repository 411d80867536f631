use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use freqsplat::data_io::formats::{flow_to_rgb, log_amplitude_image, read_ply, write_flo, write_png, write_ply};
use freqsplat::data_io::synthetic::{synth_scene, SceneKind, SceneSpec};
use freqsplat::data_io::{load_dataset, read_camera_file, save_dataset, ssim};
use freqsplat::gradcheck::{run_gradcheck, GradcheckSpec, Module, SignInjection};
use freqsplat::shf::{fft2, ShfWeights};
use freqsplat::thf::lk_flow_with;
use freqsplat::trainer::{
    checkpoint, ensure_image_size, render_state, train as run_training, TrainConfig, TrainOptions, Trainer,
};
use freqsplat::{Error, Image};
use serde_json::json;

use crate::{EvalArgs, Failure, GradcheckArgs, RenderArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.fqs";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const METRICS_LOG: &str = "metrics.jsonl";
const LOCK_FILE: &str = ".freqsplat.lock";

static CANCEL: AtomicBool = AtomicBool::new(false);

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

/// Exclusive use of an output directory for the lifetime of the guard.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Data(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let kind = SceneKind::from_name(&a.scene)?;
    if a.out.join("camera.json").exists() && !a.force {
        return Err(Failure::Config(format!(
            "{} already holds a dataset; pass --force to overwrite",
            a.out.display()
        )));
    }
    let _lock = OutputLock::acquire(&a.out)?;
    let mut spec = SceneSpec::new(kind, a.seed);
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    spec.frames = a.frames.unwrap_or(spec.frames);
    let scene = synth_scene(&spec)?;
    save_dataset(&scene.dataset(), &a.out)?;
    write_ply(&scene.cloud, &a.out.join("gt_cloud.ply"))?;
    log::info!("wrote {} frames of {} to {}", spec.frames, kind.name(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            TrainConfig::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.static_iters => cfg.static_iters);
    set!(a.deform_iters => cfg.deform_iters);
    set!(a.seed => cfg.seed);
    set!(a.lambda_d => cfg.weights.lambda_d);
    set!(a.lambda_tv => cfg.weights.lambda_tv);
    set!(a.lambda_shf => cfg.weights.lambda_shf);
    set!(a.lambda_thf => cfg.weights.lambda_thf);
    set!(a.max_gaussians => cfg.max_gaussians);
    set!(a.checkpoint_interval => cfg.checkpoint_interval);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = load_config(a)?;
    let dataset = load_dataset(&a.data)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let resume = if a.resume {
        if !ckpt_path.exists() {
            return Err(Failure::Config(format!("--resume given but {} does not exist", ckpt_path.display())));
        }
        Some(checkpoint::load(&ckpt_path)?)
    } else {
        if ckpt_path.exists() && !a.force {
            return Err(Failure::Config(format!(
                "{} exists; pass --force to overwrite or --resume to continue",
                ckpt_path.display()
            )));
        }
        None
    };
    let initial_cloud = match &a.init_ply {
        Some(p) => Some(read_ply(p)?),
        None => None,
    };
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_toml())?;

    let log_path = a.out.join(LOSS_LOG);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut log_error = None;
    let mut on_report = |r: &freqsplat::objective::LossReport| {
        if log_error.is_none() {
            let line = serde_json::to_string(r).expect("loss report serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_error = Some(e);
            }
        }
        if r.iteration % 100 == 0 {
            log::info!("iteration {} ({:?}): total {:.4}", r.iteration, r.stage, r.total);
        }
    };
    if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst)) {
        log::warn!("could not install the interrupt handler: {e}");
    }
    let outcome = run_training(
        &dataset,
        &cfg,
        TrainOptions {
            resume,
            initial_cloud,
            checkpoint_path: Some(ckpt_path.clone()),
            stop_after: None,
            cancel: Some(&CANCEL),
            on_report: Some(&mut on_report),
        },
    )?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    if let Some(e) = log_error {
        return Err(io_err(&log_path, e));
    }
    let summary = json!({
        "iterations": outcome.state.iteration,
        "gaussians": outcome.state.cloud.count(),
        "final_psnr": outcome.final_psnr,
        "interrupted": outcome.interrupted,
        "config_hash": cfg.hash(),
    });
    write_text(&a.out.join(SUMMARY_FILE), &format!("{summary:#}\n"))?;
    write_ply(&outcome.state.cloud, &a.out.join("cloud.ply"))?;
    if outcome.interrupted {
        log::warn!("interrupted after {} iterations; checkpoint saved", outcome.state.iteration);
    }
    log::info!("final mean PSNR {:.3} dB", outcome.final_psnr);
    Ok(())
}

pub fn render(a: &RenderArgs) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    let cam_file = read_camera_file(&a.data)?;
    if [cam_file.width, cam_file.height] != ck.state.image_size {
        return Err(Failure::Data(format!(
            "camera is {}x{} but the checkpoint was trained on {}x{}",
            cam_file.width, cam_file.height, ck.state.image_size[0], ck.state.image_size[1]
        )));
    }
    let times = if a.times.is_empty() {
        let dataset = load_dataset(&a.data)?;
        dataset.frames.iter().map(|f| f.time).collect()
    } else {
        a.times.clone()
    };
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Failure::Config(format!("render time {t} is outside [0, 1]")));
    }
    let _lock = OutputLock::acquire(&a.out)?;
    let camera = cam_file.camera_for(a.camera);
    for (k, &t) in times.iter().enumerate() {
        let out = render_state(&ck.state, &camera, t, ck.config.tile_size)?;
        write_png(&out.image.map(|v| v.clamp(0.0, 1.0)), &a.out.join(format!("render_{k:04}.png")))?;
    }
    log::info!("rendered {} frames to {}", times.len(), a.out.display());
    Ok(())
}

fn scaled(img: &Image) -> Image {
    let max = img.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        img.map(|v| v.abs() / max)
    } else {
        img.clone()
    }
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    ensure_image_size(&ck.state, &dataset)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let trainer = Trainer::new(&dataset, &ck.config)?;
    let psnrs = trainer.frame_psnr(&ck.state)?;
    let mut renders = Vec::with_capacity(dataset.len());
    let mut table = String::from("frame\tPSNR\tSSIM\n");
    let metrics_path = a.out.join(METRICS_LOG);
    let mut jsonl = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    let mut ssims = Vec::with_capacity(dataset.len());
    for (i, frame) in dataset.frames.iter().enumerate() {
        let img = trainer.render_frame(&ck.state, i)?.image.map(|v| v.clamp(0.0, 1.0));
        let s = ssim(&img, &frame.image)?;
        table.push_str(&format!("{i}\t{:.3}\t{:.4}\n", psnrs[i], s));
        writeln!(jsonl, "{}", json!({"frame": i, "psnr": psnrs[i].min(100.0), "ssim": s}))
            .map_err(|e| io_err(&metrics_path, e))?;
        write_png(&img, &a.out.join(format!("render_{i:04}.png")))?;
        ssims.push(s);
        renders.push(img);
    }
    jsonl.flush().map_err(|e| io_err(&metrics_path, e))?;
    let mean_psnr = psnrs.iter().map(|p| p.min(100.0)).sum::<f64>() / psnrs.len() as f64;
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    table.push_str(&format!("mean\t{mean_psnr:.3}\t{mean_ssim:.4}\n"));
    write_text(&a.out.join(METRICS_TABLE), &table)?;
    print!("{table}");

    if a.spectra {
        let dir = a.out.join("spectra");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (i, frame) in dataset.frames.iter().enumerate() {
            let gt = fft2(&frame.image)?;
            write_png(&log_amplitude_image(&gt, 1), &dir.join(format!("gt_amplitude_{i:04}.png")))?;
            let rendered = fft2(&renders[i])?;
            write_png(&log_amplitude_image(&rendered, 1), &dir.join(format!("render_amplitude_{i:04}.png")))?;
            let w = ShfWeights::from_ground_truth(&frame.image, ck.config.shf_radius_ratio)?;
            write_png(&scaled(&w.0), &dir.join(format!("highpass_{i:04}.png")))?;
        }
    }
    if a.flow {
        let dir = a.out.join("flow");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for p in 1..dataset.len() {
            let f = lk_flow_with(&renders[p - 1], &renders[p], &ck.config.lk)?;
            let max = f.max_magnitude().max(1e-6);
            write_png(&flow_to_rgb(&f, max), &dir.join(format!("pair_{p:04}.png")))?;
            write_flo(&f, &dir.join(format!("pair_{p:04}.flo")))?;
        }
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let modules = if a.modules.is_empty() {
        Module::ALL.to_vec()
    } else {
        a.modules.iter().map(|m| Module::from_name(m)).collect::<Result<_, _>>()?
    };
    let inject = match &a.inject_sign_error {
        Some(s) => {
            let (m, g) = s
                .split_once('/')
                .ok_or_else(|| Failure::Config(format!("--inject-sign-error expects module/group, got '{s}'")))?;
            Some(SignInjection {
                module: Module::from_name(m)?,
                group: g.to_string(),
            })
        }
        None => None,
    };
    let spec = GradcheckSpec {
        seed: a.seed,
        gaussians: a.gaussians,
        size: a.size,
        samples: a.samples,
        modules,
        inject,
    };
    let report = run_gradcheck(&spec)?;
    print!("{report}");
    let failures = report.failures();
    if failures.is_empty() {
        println!("gradcheck passed: {} groups", report.checks.len());
        Ok(())
    } else {
        let names: Vec<String> = failures.iter().map(|c| format!("{}/{}", c.module.name(), c.group)).collect();
        Err(Failure::Numeric(format!("gradient check failed for {}", names.join(", "))))
    }
}

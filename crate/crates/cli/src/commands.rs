use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use vita_core::dataio::pnm::{read_pgm, read_ppm, write_pgm};
use vita_core::dataio::{crop_roi, paste_back, read_dataset, roi_samples, RoISample};
use vita_core::eval::{evaluate, lambda_sweep, sweep_csv, EvalOptions};
use vita_core::model::{load_checkpoint, HeadKind, Model, ModelConfig};
use vita_core::scenegen::{generate_dataset, SceneConfig, Split, DEFAULT_TARGET_MIX};
use vita_core::train::{fit, AdamWConfig, FitConfig, LossConfig, TrainSample, PAPER_LR, TOY_LR};
use vita_core::{verify, Tensor};

use crate::args::{Arch, EvalArgs, FitArgs, GenerateArgs, GradcheckArgs, PredictArgs, Preset, SplitArg, SweepArgs, TrainArgs};
use crate::manifest::{beside, RunManifest};
use crate::UsageError;

pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_LAMBDA_O: f64 = 0.25;

fn head_kind(arch: Arch) -> HeadKind {
    match arch {
        Arch::Single => HeadKind::Single,
        Arch::Dual => HeadKind::Dual,
    }
}

fn split_filter(split: SplitArg) -> Option<Split> {
    match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::All => None,
    }
}

fn load_samples(data: &Path, split: Option<Split>, side: usize) -> Result<Vec<RoISample>> {
    let dataset = read_dataset(data).with_context(|| format!("opening dataset {}", data.display()))?;
    let scenes = dataset.load_all()?;
    Ok(roi_samples(&scenes, split, side)?)
}

fn training_set(args: &FitArgs, side: usize) -> Result<Vec<TrainSample<f32>>> {
    let mut samples = load_samples(&args.data, Some(Split::Train), side)?;
    if let Some(n) = args.max_instances {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(UsageError("training split has no usable instances".into()).into());
    }
    eprintln!("training on {} instances", samples.len());
    Ok(samples.iter().map(RoISample::to_train_sample).collect())
}

fn fit_config(args: &FitArgs, lambda_o: f64) -> Result<FitConfig> {
    let lr = args.lr.unwrap_or(match args.preset {
        Preset::Toy => TOY_LR,
        Preset::Paper => PAPER_LR,
    });
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(UsageError(format!("learning rate {lr} must be finite and non-negative")).into());
    }
    if args.batch == 0 {
        return Err(UsageError("batch size must be positive".into()).into());
    }
    Ok(FitConfig {
        steps: args.steps,
        batch_size: args.batch,
        optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
        loss: LossConfig::new(args.lambda_a, lambda_o)?,
        seed: args.seed,
        log_path: None,
        checkpoint_path: None,
    })
}

pub fn generate(args: &GenerateArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let cfg = SceneConfig {
        n_scenes: args.scenes,
        objects_min: args.objects_min,
        objects_max: args.objects_max,
        scene_side: args.side,
        seed: args.seed,
        train_fraction: args.train_fraction,
        target_mix: (!args.no_steer).then_some(DEFAULT_TARGET_MIX),
        ..SceneConfig::default()
    };
    let scenes = generate_dataset(&cfg, &args.out)?;
    let n: usize = scenes.iter().map(|s| s.instances.len()).sum();
    println!("wrote {} scenes, {n} instances to {}", scenes.len(), args.out.display());

    let manifest_path = args.out.join(MANIFEST_FILE);
    let mut m = RunManifest::new("generate", args, threads)?.seed("scene_seed", args.seed);
    m.add_tree(&args.out, &manifest_path)?;
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path)
}

pub fn train(args: &TrainArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let kind = head_kind(args.arch);
    let lambda_o = match (kind, args.lambda_o) {
        (HeadKind::Single, Some(l)) if l != 0.0 => {
            return Err(UsageError("--lambda-o must be 0 for the single head".into()).into());
        }
        (HeadKind::Single, _) => 0.0,
        (HeadKind::Dual, l) => l.unwrap_or(DEFAULT_LAMBDA_O),
    };
    let mut cfg = fit_config(&args.fit, lambda_o)?;
    let mut model: Model<f32> = match &args.init_checkpoint {
        Some(path) => {
            let m = open_checkpoint(path)?;
            let want = ModelConfig::preset(args.fit.preset.name(), kind)?;
            if m.config().head_kind != kind || m.config().image_side != want.image_side || m.config().embed_dim != want.embed_dim {
                return Err(UsageError(format!("{} does not match --arch/--preset", path.display())).into());
            }
            m
        }
        None => Model::new(ModelConfig::preset(args.fit.preset.name(), kind)?.with_seed(args.fit.seed))?,
    };
    let samples = training_set(&args.fit, model.config().image_side)?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.vita");
    let log = args.out.join("train_log.jsonl");
    cfg.log_path = Some(log.clone());
    cfg.checkpoint_path = Some(ckpt.clone());
    let records = fit(&mut model, &samples, &cfg)?;
    if let Some(last) = records.last() {
        println!(
            "step {}: loss_a {:.5} loss_o {:.5} total {:.5}",
            last.step, last.loss_a, last.loss_o, last.loss_total
        );
    }
    println!("checkpoint {}", ckpt.display());

    let mut m = RunManifest::new("train", args, threads)?.seed("init_seed", args.fit.seed).seed("batch_seed", args.fit.seed);
    m.config_fingerprint = Some(model.config().fingerprint());
    m.add_artifact(&ckpt, &args.out)?;
    m.add_artifact(&log, &args.out)?;
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&args.out.join(MANIFEST_FILE))
}

pub fn eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let model: Model<f32> = open_checkpoint(&args.checkpoint)?;
    let samples = load_samples(&args.data, split_filter(args.split), model.config().image_side)?;
    let opts = EvalOptions {
        threshold: args.thr,
        seed: args.seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &samples, &opts)?;
    let m = &report.metrics;
    println!("instances {}", m.n_samples);
    println!("mIoU_A {:.4}  mIoU_V {:.4}  mIoU_O {:.4}", m.miou_a, m.miou_v, m.miou_o);
    for b in &m.per_bin {
        match b.miou_o {
            Some(v) => println!("  {:<6} n={:<4} mIoU_O {v:.4}", b.bin.as_str(), b.count),
            None => println!("  {:<6} n=0", b.bin.as_str()),
        }
    }
    println!("t_inf {:.3} ms (std {:.3})", report.timing.t_inf_ms, report.timing.t_inf_std_ms);
    write_parent(&args.report)?;
    std::fs::write(&args.report, report.to_json()? + "\n")?;

    let base = args.report.parent().unwrap_or(Path::new(""));
    let mut man = RunManifest::new("eval", args, threads)?.seed("timing_seed", args.seed);
    man.config_fingerprint = Some(report.config_fingerprint.clone());
    man.add_artifact(&args.report, base)?;
    man.wall_clock_s = start.elapsed().as_secs_f64();
    man.write(&beside(&args.report))
}

pub fn predict(args: &PredictArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    let model: Model<f32> = open_checkpoint(&args.checkpoint)?;
    let image = read_ppm(&args.image)?;
    let visible = read_pgm(&args.visible_mask)?;
    let side = model.config().image_side;
    let roi = crop_roi(&image, &visible, side)?;
    let x = Tensor::new(vec![1, 4, side, side], roi.to_input::<f32>())?;
    let pred = model.predict(&x)?;
    let amodal = paste_back(pred.amodal.batch_item(0), &roi, args.thr)?;
    let occluded = match &pred.occluded {
        Some(o) => paste_back(o.batch_item(0), &roi, args.thr)?,
        None => amodal.and_not(&visible)?,
    };

    let prefix = args.out_prefix.to_string_lossy().into_owned();
    let a_path = format!("{prefix}_amodal.pgm");
    let o_path = format!("{prefix}_occluded.pgm");
    write_parent(Path::new(&a_path))?;
    write_pgm(&a_path, &amodal)?;
    write_pgm(&o_path, &occluded)?;
    println!("amodal {} px -> {a_path}", amodal.count());
    println!("occluded {} px -> {o_path}", occluded.count());

    let mut man = RunManifest::new("predict", args, threads)?;
    man.config_fingerprint = Some(model.config().fingerprint());
    man.add_artifact(Path::new(&a_path), Path::new(""))?;
    man.add_artifact(Path::new(&o_path), Path::new(""))?;
    man.wall_clock_s = start.elapsed().as_secs_f64();
    man.write(Path::new(&format!("{prefix}_manifest.json")))
}

pub fn sweep(args: &SweepArgs, threads: usize) -> Result<()> {
    let start = Instant::now();
    if args.lambdas.is_empty() {
        return Err(UsageError("--lambdas is empty".into()).into());
    }
    let cfg = ModelConfig::preset(args.fit.preset.name(), HeadKind::Dual)?.with_seed(args.fit.seed);
    let side = cfg.image_side;
    let train = training_set(&args.fit, side)?;
    let val = load_samples(&args.fit.data, Some(Split::Val), side)?;
    let fit_cfg = fit_config(&args.fit, 0.0)?;
    let opts = EvalOptions {
        threshold: args.thr,
        ..EvalOptions::default()
    };
    let rows = lambda_sweep(|| Model::<f32>::new(cfg.clone()), &train, &val, &args.lambdas, &fit_cfg, &opts)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    let mut m = RunManifest::new("sweep", args, threads)?.seed("init_seed", args.fit.seed).seed("batch_seed", args.fit.seed);
    m.config_fingerprint = Some(cfg.fingerprint());
    m.add_artifact(&csv_path, &args.out)?;
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&args.out.join(MANIFEST_FILE))
}

/// Returns whether every row passed.
pub fn gradcheck(args: &GradcheckArgs, threads: usize) -> Result<bool> {
    let start = Instant::now();
    let rows = verify::gradient_suite(args.seed)?;
    println!("{:<18} {:>7} {:>6} {:>12} {:>9}  status", "op", "checked", "kinked", "max_rel_err", "tol");
    for r in &rows {
        println!(
            "{:<18} {:>7} {:>6} {:>12.3e} {:>9.1e}  {}",
            r.name,
            r.checked,
            r.kinked,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let all = rows.iter().all(|r| r.passed);
    write_parent(&args.report)?;
    std::fs::write(&args.report, serde_json::to_string_pretty(&rows)? + "\n")?;

    let base = args.report.parent().unwrap_or(Path::new(""));
    let mut m = RunManifest::new("gradcheck", args, threads)?.seed("seed", args.seed);
    m.add_artifact(&args.report, base)?;
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&beside(&args.report))?;
    Ok(all)
}

fn open_checkpoint(path: &Path) -> Result<Model<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

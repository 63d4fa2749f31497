use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use stillbox_core::baseline::{baseline_depth, median, radial_errors};
use stillbox_core::dataset::{generate_dataset, load_dataset, pfm, read_png, GenerateOptions, SceneRecord};
use stillbox_core::depthnet::{
    constant_oracle, evaluate, finetune_curriculum, load_checkpoint, network_gradient_check, save_checkpoint, train,
    Checkpoint, DepthNet, EvalPlan, NetError, NetworkConfig, TrainOptions,
};
use stillbox_core::geometry::foe_from_translation;
use stillbox_core::gradkit::suite::{operator_suite, FD_EPS};
use stillbox_core::gradkit::OptimizerConfig;
use stillbox_core::inference::{
    adaptive_shift_update, error_image, false_color, multi_shift_infer, InferenceConfig, MultiShiftDepth,
};
use stillbox_core::{DepthMap, Foe};

use crate::{Command, Failure, TrainArgs};

/// Tolerance of `check --gradients`.
const GRADIENT_TOLERANCE: f64 = 1e-4;

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn net_failure(e: NetError) -> Failure {
    match e {
        NetError::Config(_) => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { scenes, size, seed, out, test_fraction } => generate(scenes, size, seed, &out, test_fraction),
        Command::Train { data, config, epochs, seed, out, train } => train_cmd(&data, &config, epochs, seed, &out, &train),
        Command::Finetune { schedule, data, epochs, config, seed, out, train } => {
            finetune(&schedule, &data, &epochs, &config, seed, &out, &train)
        }
        Command::Eval { ckpt, data, report, pairs, seed } => eval(&ckpt, &data, &report, pairs, seed),
        Command::Infer { ckpt, frames, speed, shifts, out, fps, v0, e0 } => {
            let config = InferenceConfig { v0, fps, e0, ..InferenceConfig::default() };
            infer(&ckpt, &frames, speed, &shifts, &out, config)
        }
        Command::Baseline { data, report, split, shift, limit } => baseline(&data, &report, &split, shift, limit),
        Command::Check { gradients, seed } => check(gradients, seed),
    }
}

fn generate(scenes: usize, size: usize, seed: u64, out: &Path, test_fraction: f64) -> Result<(), Failure> {
    if scenes < 2 {
        return Err(invalid("need at least two scenes for a train/test split"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let opts = GenerateOptions { test_fraction, ..GenerateOptions::new(scenes, size, seed) };
    let index = generate_dataset(out, &opts)?;
    println!("wrote {} train and {} test scenes at {size} px to {}", index.train.len(), index.test.len(), out.display());
    Ok(())
}

fn train_options(epochs: usize, seed: u64, args: &TrainArgs) -> Result<TrainOptions, Failure> {
    if epochs == 0 || args.batch_size == 0 || args.samples_per_scene == 0 {
        return Err(invalid("epochs, batch size and samples per scene must be positive"));
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(invalid(format!("learning rate {} must be positive", args.lr)));
    }
    Ok(TrainOptions {
        epochs,
        seed,
        batch_size: args.batch_size,
        samples_per_scene: args.samples_per_scene,
        optimizer: OptimizerConfig::default().with_lr(args.lr),
        ..TrainOptions::default()
    })
}

fn log_path(out: &Path, log: &Option<PathBuf>) -> PathBuf {
    log.clone().unwrap_or_else(|| out.with_extension("csv"))
}

fn finish_training(ckpt: &Checkpoint, out: &Path, args: &TrainArgs) -> Result<(), Failure> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(out, ckpt).map_err(net_failure)?;
    let log = log_path(out, &args.log);
    write_file(&log, &ckpt.log.to_csv())?;
    if let Some(e) = ckpt.log.last_epoch() {
        println!("final test L1 {:.4} RMSE {:.4}; checkpoint {} log {}", e.test_l1, e.test_rmse, out.display(), log.display());
    }
    Ok(())
}

fn train_cmd(data: &Path, config: &str, epochs: usize, seed: u64, out: &Path, args: &TrainArgs) -> Result<(), Failure> {
    let config = NetworkConfig::by_name(config).map_err(net_failure)?;
    let opts = train_options(epochs, seed, args)?;
    let ds = load_dataset(data)?;
    config.check_input(ds.index.resolution, ds.index.resolution).map_err(net_failure)?;
    let net = DepthNet::new(config, seed).map_err(net_failure)?;
    let ckpt = train(net, &ds.train, &ds.test, &opts).map_err(net_failure)?;
    finish_training(&ckpt, out, args)
}

fn finetune(
    schedule: &[usize],
    data: &[PathBuf],
    epochs: &[usize],
    config: &str,
    seed: u64,
    out: &Path,
    args: &TrainArgs,
) -> Result<(), Failure> {
    if data.len() != schedule.len() {
        return Err(invalid(format!("{} datasets for a {}-stage schedule", data.len(), schedule.len())));
    }
    let epochs = match epochs {
        [e] => vec![*e; schedule.len()],
        e if e.len() == schedule.len() => e.to_vec(),
        e => return Err(invalid(format!("{} epoch counts for a {}-stage schedule", e.len(), schedule.len()))),
    };
    let config = NetworkConfig::by_name(config).map_err(net_failure)?;
    let opts = train_options(epochs.iter().copied().max().unwrap_or(0), seed, args)?;
    let sets = data.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    for (&res, ds) in schedule.iter().zip(&sets) {
        if ds.index.resolution != res {
            return Err(invalid(format!("{} holds {} px scenes, schedule expects {res}", ds.root.display(), ds.index.resolution)));
        }
    }
    let stages: Vec<(&[SceneRecord], &[SceneRecord])> = sets.iter().map(|d| (&d.train[..], &d.test[..])).collect();
    let ckpt = finetune_curriculum(config, schedule, &epochs, &stages, &opts).map_err(net_failure)?;
    for s in &ckpt.log.stages {
        if let (Some(i), Some(e)) = (&s.initial_test, s.epochs.last()) {
            println!("stage {} px: initial test L1 {:.4}, final {:.4}", s.resolution, i.l1, e.test_l1);
        }
    }
    finish_training(&ckpt, out, args)
}

fn eval(ckpt: &Path, data: &Path, report: &Path, pairs: usize, seed: u64) -> Result<(), Failure> {
    if pairs == 0 {
        return Err(invalid("need at least one evaluation pair per scene"));
    }
    let ck = load_checkpoint(ckpt).map_err(net_failure)?;
    let ds = load_dataset(data)?;
    let res = ds.index.resolution;
    ck.net.config.check_input(res, res).map_err(net_failure)?;
    let spec = TrainOptions::default().shifts;
    let mut csv = String::from("split,L1,RMSE,pixels\n");
    for (name, records) in [("train", &ds.train), ("test", &ds.test)] {
        let plan = EvalPlan::new(records, pairs, &spec, seed);
        let m = evaluate(&ck.net, records, &plan).map_err(net_failure)?;
        let (_, oracle) = constant_oracle(records, &plan, res / 4).map_err(net_failure)?;
        writeln!(csv, "{name},{:.6},{:.6},{}", m.l1, m.rmse, m.count).unwrap();
        writeln!(csv, "{name}_constant_oracle,{:.6},{:.6},{}", oracle.l1, oracle.rmse, oracle.count).unwrap();
        println!("{name}: L1 {:.4} RMSE {:.4} (constant oracle L1 {:.4})", m.l1, m.rmse, oracle.l1);
    }
    write_file(report, &csv)
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("frame_") && name.ends_with(".png")
        })
        .collect();
    frames.sort();
    Ok(frames)
}

fn save_map(out: &Path, stem: &str, depth: &DepthMap, max_depth: f32) -> Result<(), Failure> {
    pfm::write(&out.join(format!("{stem}.pfm")), depth)?;
    let png = out.join(format!("{stem}.png"));
    false_color(depth, max_depth).save(&png).with_context(|| format!("writing {}", png.display()))?;
    Ok(())
}

fn infer(
    ckpt: &Path,
    frames_dir: &Path,
    speed: f64,
    shifts: &[usize],
    out: &Path,
    config: InferenceConfig,
) -> Result<(), Failure> {
    config.validate().map_err(|e| invalid(e))?;
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(invalid(format!("speed must be positive, got {speed}")));
    }
    let paths = frame_paths(frames_dir)?;
    let max_shift = shifts.iter().copied().max().unwrap_or(0);
    if shifts.is_empty() || shifts.contains(&0) || max_shift >= paths.len() {
        return Err(invalid(format!("shifts {shifts:?} do not fit a buffer of {} frames", paths.len())));
    }
    let ck = load_checkpoint(ckpt).map_err(net_failure)?;
    let buffer = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>, _>>()?;
    let res = buffer[0].width;
    ck.net.config.check_input(buffer[0].height, res).map_err(net_failure)?;
    let config = InferenceConfig { buffer_length: buffer.len(), ..config };
    let MultiShiftDepth { fused, per_shift } =
        multi_shift_infer(&buffer, shifts, &ck.net, speed, &config).map_err(|e| Failure::Runtime(e.into()))?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let top = config.ceiling(config.effective_velocity(speed, max_shift)) as f32;
    let mut csv = String::from("map,shift,effective_velocity,ceiling_m,mean_depth_m\n");
    for (s, map) in &per_shift {
        let v_t = config.effective_velocity(speed, *s);
        writeln!(csv, "shift_{s},{s},{v_t:.6},{:.6},{:.6}", config.ceiling(v_t), map.mean()).unwrap();
        save_map(out, &format!("shift_{s}"), map, top)?;
    }
    save_map(out, "fused", &fused, top)?;
    let current = per_shift[0].0;
    let next = adaptive_shift_update(current, &fused, &config);
    writeln!(csv, "fused,,,,{:.6}", fused.mean()).unwrap();
    write_file(&out.join("report.csv"), &csv)?;

    let reference = paths.last().expect("non-empty buffer");
    let gt_path = reference.with_file_name(
        reference.file_name().and_then(|n| n.to_str()).unwrap_or("").replace("frame_", "depth_").replace(".png", ".pfm"),
    );
    if gt_path.exists() {
        let gt = pfm::read(&gt_path)?;
        let factor = gt.width / fused.width;
        let gt = stillbox_core::dataset::pool_depth(&gt, factor)?;
        let png = out.join("error.png");
        error_image(&fused, &gt, 10.0)
            .map_err(|e| Failure::Runtime(e.into()))?
            .save(&png)
            .with_context(|| format!("writing {}", png.display()))?;
    }
    println!("fused mean depth {:.3} m; next shift {next} (from {current})", fused.mean());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

fn baseline(data: &Path, report: &Path, split: &str, shift: usize, limit: Option<usize>) -> Result<(), Failure> {
    let ds = load_dataset(data)?;
    let records = match split {
        "train" => &ds.train,
        "test" => &ds.test,
        other => return Err(invalid(format!("unknown split `{other}`"))),
    };
    let records = &records[..limit.unwrap_or(records.len()).min(records.len())];
    if let Some(r) = records.first() {
        if shift == 0 || shift >= r.len() {
            return Err(invalid(format!("shift {shift} outside the {}-frame sequences", r.len())));
        }
    }
    let mut csv = String::from("scene,valid_fraction,l1_m,median_abs_error_m,foe_error_px,near_median_m,far_median_m\n");
    for r in records {
        let cam = r.camera();
        let t = r.pair_translation(0, shift as i32);
        let (depth, foe) = baseline_depth(&r.frames[0], &r.frames[shift], &cam, t.speed())?;
        let truth_foe = foe_from_translation(&cam, &t)?;
        let foe_error = match (foe.point(), truth_foe.point()) {
            (Some(a), Some(b)) => Some(a.distance(&b)),
            (None, None) => Some(0.0),
            _ => None,
        };
        let errors: Vec<f64> = (0..depth.valid.len())
            .filter(|&i| depth.valid[i])
            .map(|i| (depth.depth.data[i] as f64 - r.depths[0].data[i] as f64).abs())
            .collect();
        let l1 = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
        let (near, far) = match truth_foe {
            Foe::Finite { point, .. } => {
                let w = cam.width as f64;
                let radial = radial_errors(&cam, &depth, &r.depths[0], point);
                let pick = |keep: &dyn Fn(f64) -> bool| {
                    median(&radial.iter().filter(|e| keep(e.radius)).map(|e| e.abs_error).collect::<Vec<_>>())
                };
                (pick(&|d| d <= 0.1 * w), pick(&|d| d > 0.3 * w))
            }
            Foe::AtInfinity { .. } => (None, None),
        };
        writeln!(
            csv,
            "{},{:.6},{},{},{},{},{}",
            r.id,
            depth.valid_count() as f64 / depth.valid.len() as f64,
            fmt_opt(l1),
            fmt_opt(median(&errors)),
            fmt_opt(foe_error),
            fmt_opt(near),
            fmt_opt(far)
        )
        .unwrap();
    }
    write_file(report, &csv)?;
    println!("scored {} scenes into {}", records.len(), report.display());
    Ok(())
}

fn check(gradients: bool, seed: u64) -> Result<(), Failure> {
    if !gradients {
        return Err(invalid("nothing to check; pass --gradients"));
    }
    let mut failed = 0;
    for (name, r) in operator_suite(seed)? {
        let ok = r.max_rel_error <= GRADIENT_TOLERANCE;
        failed += usize::from(!ok);
        println!("{} {name}: max relative error {:.3e}", if ok { "PASS" } else { "FAIL" }, r.max_rel_error);
    }
    let r = network_gradient_check(NetworkConfig::mini(), 32, 2, 8, FD_EPS, seed).map_err(net_failure)?;
    let ok = r.worst.max_rel_error <= GRADIENT_TOLERANCE;
    failed += usize::from(!ok);
    println!(
        "{} mini network ({} coordinates): max relative error {:.3e} at {}",
        if ok { "PASS" } else { "FAIL" },
        r.coordinates,
        r.worst.max_rel_error,
        r.worst_parameter
    );
    if failed > 0 {
        return Err(invalid(format!("{failed} gradient checks above {GRADIENT_TOLERANCE:e}")));
    }
    Ok(())
}

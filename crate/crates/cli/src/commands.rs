use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use ftseg_core::checkpoint;
use ftseg_core::data::{
    export_dataset, generate_synthetic, load_dataset_dir, save_gray_png, split, DatasetStats, SplitSpec,
    SyntheticConfig,
};
use ftseg_core::gradcheck::{suites, GradReport};
use ftseg_core::loss::{focal_curve, write_curve_csv, FocalExponent, LossConfig, LossKind};
use ftseg_core::model::{ModelConfig, Variant};
use ftseg_core::train::{
    default_grid, evaluate, run_ablation, train as fit, write_ablation_csv, AblationRow, Protocol, TrainConfig,
};
use ftseg_core::{Error, Model64, Sample64};

use crate::config::{parse_size, List, RunConfig};
use crate::error::CliError;
use crate::{AblateArgs, ArchArgs, CurveArgs, DataArgs, EvalArgs, GradcheckArgs, LossArgs, ModelArgs, OptimArgs};
use crate::{Scope, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const DATA_KEYS: [&str; 2] = ["data", "size"];
const ARCH_KEYS: [&str; 2] = ["depth", "base_channels"];
const MODEL_KEYS: [&str; 2] = ["variant", "deep_supervision"];
const LOSS_KEYS: [&str; 4] = ["loss", "alpha", "beta", "gamma"];
const OPTIM_KEYS: [&str; 9] = [
    "lr", "momentum", "decay", "batch", "epochs", "clip", "seed", "epsilon", "exponent",
];

fn schema(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn parse_with<T>(key: &str, value: Option<String>, f: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
    value
        .map(|v| f(&v).map_err(|e| CliError::Usage(format!("{key}: {e}"))))
        .transpose()
}

fn load_data(cfg: &RunConfig, args: DataArgs) -> Result<Vec<Sample64>> {
    let root: PathBuf = require(cfg.pick("data", args.data)?, "data")?;
    let size = parse_with("size", cfg.pick("size", args.size)?, parse_size)?;
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", root.display())));
    }
    let samples = load_dataset_dir::<f64>(&root, size)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", root.display())));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    if let Some(odd) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Incompatible(format!(
            "{} is {}x{} but {} is {h}x{w}; pass --size to resample",
            odd.id,
            odd.height(),
            odd.width(),
            samples[0].id
        ))
        .into());
    }
    Ok(samples)
}

fn model_config(
    cfg: &RunConfig,
    arch: ArchArgs,
    model: Option<ModelArgs>,
    input_channels: usize,
    seed: u64,
) -> Result<ModelConfig> {
    let defaults = ModelConfig::default();
    let (variant, deep) = match model {
        Some(m) => {
            let variant: Variant = cfg.pick_or("variant", m.variant, defaults.variant.label().to_string())?.parse()?;
            let deep = cfg.pick_or("deep_supervision", m.deep_supervision, variant != Variant::Unet)?;
            (variant, deep)
        }
        None => (defaults.variant, defaults.deep_supervision),
    };
    let out = ModelConfig {
        variant,
        depth: cfg.pick_or("depth", arch.depth, defaults.depth)?,
        base_channels: cfg.pick_or("base_channels", arch.base_channels, defaults.base_channels)?,
        deep_supervision: deep,
        input_channels,
        seed,
    };
    out.validate()?;
    Ok(out)
}

fn train_config(cfg: &RunConfig, optim: OptimArgs, loss: Option<LossArgs>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let exponent: FocalExponent = cfg
        .pick_or("exponent", optim.exponent, "as_printed".to_string())?
        .parse()?;
    let epsilon = cfg.pick_or("epsilon", optim.epsilon, LossConfig::DEFAULT_EPSILON)?;
    let (kind, loss_cfg) = match loss {
        Some(l) => {
            let kind: LossKind = cfg.pick_or("loss", l.loss, "ftl".to_string())?.parse()?;
            let preset = if kind == LossKind::Dice {
                LossConfig::dice()
            } else {
                LossConfig::tversky()
            };
            let lc = LossConfig {
                alpha: cfg.pick_or("alpha", l.alpha, preset.alpha)?,
                beta: cfg.pick_or("beta", l.beta, preset.beta)?,
                gamma: cfg.pick_or("gamma", l.gamma, preset.gamma)?,
                epsilon,
                exponent,
                ..preset
            };
            (kind, lc)
        }
        None => (
            d.loss_kind,
            LossConfig {
                epsilon,
                exponent,
                ..d.loss
            },
        ),
    };
    let out = TrainConfig {
        learning_rate: cfg.pick_or("lr", optim.lr, d.learning_rate)?,
        momentum: cfg.pick_or("momentum", optim.momentum, d.momentum)?,
        decay: cfg.pick_or("decay", optim.decay, d.decay)?,
        epochs: cfg.pick_or("epochs", optim.epochs, d.epochs)?,
        batch_size: cfg.pick_or("batch", optim.batch, d.batch_size)?,
        loss: loss_cfg,
        loss_kind: kind,
        seed: cfg.pick_or("seed", optim.seed, d.seed)?,
        clip_norm: cfg.pick("clip", optim.clip)?,
    };
    out.validate()?;
    Ok(out)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    cfg.check_keys(
        "synth",
        &[
            "out", "preset", "count", "seed", "height", "width", "channels", "area_min", "area_max", "contrast",
            "noise",
        ],
    )?;
    let out: PathBuf = require(cfg.pick("out", a.out)?, "out")?;
    let preset = cfg.pick_or("preset", a.preset, "bus-like".to_string())?;
    let count = cfg.pick_or("count", a.count, 200)?;
    let seed = cfg.pick_or("seed", a.seed, 0)?;
    let base = SyntheticConfig::preset(&preset, count, seed)?;
    let sc = SyntheticConfig {
        height: cfg.pick_or("height", a.height, base.height)?,
        width: cfg.pick_or("width", a.width, base.width)?,
        channels: cfg.pick_or("channels", a.channels, base.channels)?,
        lesion_area_range: (
            cfg.pick_or("area_min", a.area_min, base.lesion_area_range.0)?,
            cfg.pick_or("area_max", a.area_max, base.lesion_area_range.1)?,
        ),
        contrast: cfg.pick_or("contrast", a.contrast, base.contrast)?,
        noise_sigma: cfg.pick_or("noise", a.noise, base.noise_sigma)?,
        ..base
    };
    let samples = generate_synthetic::<f64>(&sc)?;
    export_dataset(&samples, &out)?;
    let stats = DatasetStats::of(&samples);

    let manifest = out.join("manifest.txt");
    let mut w = create_file(&manifest)?;
    let lines = [
        format!("preset = {preset}"),
        format!("seed = {}", sc.seed),
        format!("count = {}", sc.count),
        format!("height = {}", sc.height),
        format!("width = {}", sc.width),
        format!("channels = {}", sc.channels),
        format!("area_min = {}", sc.lesion_area_range.0),
        format!("area_max = {}", sc.lesion_area_range.1),
        format!("contrast = {}", sc.contrast),
        format!("noise = {}", sc.noise_sigma),
        format!("foreground_mean = {:.6}", stats.mean),
        format!("foreground_min = {:.6}", stats.min),
        format!("foreground_max = {:.6}", stats.max),
    ];
    for l in &lines {
        writeln!(w, "{l}").map_err(|e| CliError::io(&manifest, e))?;
    }
    w.flush().map_err(|e| CliError::io(&manifest, e))?;
    println!(
        "wrote {} samples to {} (foreground fraction mean {:.6}, min {:.6}, max {:.6})",
        stats.count,
        out.display(),
        stats.mean,
        stats.min,
        stats.max
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    let keys = schema(&[
        &["out", "train_fraction", "split_seed"],
        &DATA_KEYS,
        &ARCH_KEYS,
        &MODEL_KEYS,
        &LOSS_KEYS,
        &OPTIM_KEYS,
    ]);
    cfg.check_keys("train", &keys)?;
    let out: PathBuf = require(cfg.pick("out", a.out)?, "out")?;
    let tc = train_config(&cfg, a.optim, Some(a.loss))?;
    let fraction = cfg.pick_or("train_fraction", a.train_fraction, 0.75)?;
    let split_seed = cfg.pick_or("split_seed", a.split_seed, tc.seed)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Usage(format!("train_fraction must lie in (0, 1], got {fraction}")));
    }
    let samples = load_data(&cfg, a.data)?;
    let mc = model_config(&cfg, a.arch, Some(a.model), samples[0].channels(), tc.seed)?;
    let (train_set, val_set) = if fraction < 1.0 {
        split(
            &samples,
            &SplitSpec {
                train_fraction: fraction,
                seed: split_seed,
                ..SplitSpec::default()
            },
        )?
    } else {
        (samples, Vec::new())
    };

    let mut model = Model64::new(mc)?;
    model.check_input(&[1, train_set[0].channels(), train_set[0].height(), train_set[0].width()])?;
    let history = fit(&mut model, &train_set, &val_set, &tc)?;

    create_dir(&out)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    let hist_path = out.join("history.csv");
    history.write_csv(create_file(&hist_path)?)?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} ({} parameters) for {} epochs on {} samples; final train loss {:.6}",
        model.config().variant.label(),
        model.parameter_count(),
        history.epochs.len(),
        train_set.len(),
        last.train_loss
    );
    match last.val_dice {
        Some(d) => println!("final validation dice: {d:.6} ({} samples)", val_set.len()),
        None => println!("final validation dice: n/a (no validation split)"),
    }
    println!("wrote {} and {}", out.join("model.ckpt").display(), hist_path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    let keys = schema(&[&["checkpoint", "out", "threshold", "overlays"], &DATA_KEYS]);
    cfg.check_keys("eval", &keys)?;
    let ckpt: PathBuf = require(cfg.pick("checkpoint", a.checkpoint)?, "checkpoint")?;
    let out: PathBuf = require(cfg.pick("out", a.out)?, "out")?;
    let threshold = cfg.pick_or("threshold", a.threshold, 0.5)?;
    let overlays = cfg.pick_or("overlays", a.overlays, false)?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let model: Model64 = checkpoint::load(&ckpt)?;
    let samples = load_data(&cfg, a.data)?;
    let s0 = &samples[0];
    model
        .check_input(&[1, s0.channels(), s0.height(), s0.width()])
        .map_err(|e| Error::Incompatible(format!("checkpoint {} vs dataset: {e}", ckpt.display())))?;

    let result = evaluate(&model, &samples, threshold)?;
    create_dir(&out)?;
    result.metrics().write_csv(create_file(&out.join("metrics.csv"))?)?;

    let per_image = out.join("per_image.csv");
    let mut w = create_file(&per_image)?;
    let mut write = |line: String| writeln!(w, "{line}").map_err(|e| CliError::io(&per_image, e));
    write("id,dice,precision,recall".into())?;
    for (s, sc) in samples.iter().zip(&result.per_image) {
        write(format!("{},{:.6},{:.6},{:.6}", s.id, sc.dice, sc.precision, sc.recall))?;
    }
    w.flush().map_err(|e| CliError::io(&per_image, e))?;

    if overlays {
        write_overlays(&model, &samples, threshold, &out.join("overlays"))?;
    }
    let m = result.metrics();
    println!(
        "{} images: dice {:.6} ± {:.6}, precision {:.6} ± {:.6}, recall {:.6} ± {:.6}",
        samples.len(),
        m.dice.mean,
        m.dice.std,
        m.precision.mean,
        m.precision.std,
        m.recall.mean,
        m.recall.std
    );
    Ok(())
}

/// `<id>_pred.png`, `<id>_mask.png` and `<id>_diff.png` (white where the
/// binarised prediction and the mask disagree).
fn write_overlays(model: &Model64, samples: &[Sample64], threshold: f64, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for s in samples {
        let batch = s.image.clone().reshape(vec![1, s.channels(), s.height(), s.width()])?;
        let heads = model.predict(&batch)?;
        let prob = heads.last().expect("model has a head");
        let pred: Vec<f64> = prob.data().iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect();
        let mask = s.mask.data();
        let diff: Vec<f64> = pred.iter().zip(mask).map(|(p, m)| if p != m { 1.0 } else { 0.0 }).collect();
        let (h, w) = (s.height(), s.width());
        save_gray_png(&dir.join(format!("{}_pred.png", s.id)), h, w, &pred)?;
        save_gray_png(&dir.join(format!("{}_mask.png", s.id)), h, w, mask)?;
        save_gray_png(&dir.join(format!("{}_diff.png", s.id)), h, w, &diff)?;
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    let keys = schema(&[
        &["out", "rows", "protocol", "folds", "train_fraction", "split_seed", "seeds", "jobs"],
        &DATA_KEYS,
        &ARCH_KEYS,
        &OPTIM_KEYS,
    ]);
    cfg.check_keys("ablate", &keys)?;
    let out: PathBuf = require(cfg.pick("out", a.out)?, "out")?;
    let jobs = cfg.pick_or("jobs", a.jobs, 1)?;
    if jobs == 0 {
        return Err(CliError::Usage("jobs must be >= 1".into()));
    }
    let tc = train_config(&cfg, a.optim, None)?;
    let split_spec = SplitSpec {
        train_fraction: cfg.pick_or("train_fraction", a.train_fraction, 0.75)?,
        folds: cfg.pick_or("folds", a.folds, 5)?,
        seed: cfg.pick_or("split_seed", a.split_seed, tc.seed)?,
    };
    split_spec.validate()?;
    let protocol = match cfg.pick_or("protocol", a.protocol, "cv".to_string())?.as_str() {
        "cv" => Protocol::CrossValidation(split_spec),
        "holdout" => Protocol::Holdout {
            split: split_spec,
            seeds: cfg.pick_or("seeds", a.seeds, List(vec![1, 2, 3]))?.0,
        },
        other => return Err(CliError::Usage(format!("protocol must be cv or holdout, got {other:?}"))),
    };
    let samples = load_data(&cfg, a.data)?;
    let mc = model_config(&cfg, a.arch, None, samples[0].channels(), tc.seed)?;
    let grid: Vec<AblationRow> = match cfg.pick("rows", a.rows)? {
        None => default_grid(&mc, &tc),
        Some(List(labels)) if labels.is_empty() => return Err(CliError::Usage("--rows is empty".into())),
        Some(List(labels)) => labels
            .iter()
            .map(|l| AblationRow::from_label(l, &mc, &tc))
            .collect::<std::result::Result<_, _>>()?,
    };
    let results = run_ablation(&samples, &grid, &protocol, jobs)?;
    write_ablation_csv(&results, create_file(&out)?)?;
    for r in &results {
        let m = &r.summary.metrics;
        println!(
            "{:<16} {:<22} dice {:.6} ± {:.6}  precision {:.6} ± {:.6}  recall {:.6} ± {:.6}",
            r.label, r.parameters, m.dice.mean, m.dice.std, m.precision.mean, m.precision.std, m.recall.mean, m.recall.std
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

struct Worst {
    seed: u64,
    report: GradReport,
}

fn run_suite(name: &str, first: u64, count: u64, tol: f64, check: impl Fn(u64) -> ftseg_core::Result<GradReport>) -> Result<Option<Worst>> {
    let mut worst: Option<Worst> = None;
    let (mut checked, mut skipped) = (0, 0);
    let mut failed = false;
    for seed in first..first + count {
        let r = check(seed)?;
        checked += r.checked;
        skipped += r.skipped;
        failed |= !r.pass;
        if worst.as_ref().map_or(true, |w| r.max_rel_err > w.report.max_rel_err) {
            worst = Some(Worst { seed, report: r });
        }
    }
    let w = worst.expect("at least one seed");
    println!(
        "{name}: max_rel_err {:.3e} over {checked} coordinates and {count} seed(s) ({skipped} skipped at kinks), tolerance {tol:e}: {}",
        w.report.max_rel_err,
        if failed { "FAIL" } else { "PASS" }
    );
    Ok(failed.then_some(w))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    cfg.check_keys("gradcheck", &["seed", "seeds"])?;
    let first = cfg.pick_or("seed", a.seed, 0)?;
    let count = cfg.pick_or("seeds", a.seeds, 1)?;
    if count == 0 {
        return Err(CliError::Usage("seeds must be >= 1".into()));
    }
    let scopes: &[Scope] = match a.scope {
        Scope::All => &[Scope::Losses, Scope::Gate, Scope::Model],
        ref s => std::slice::from_ref(s),
    };
    let gate_inputs = ["x", "g", "w_x", "w_g", "b_g", "psi", "b_psi"];
    let mut failures = Vec::new();
    for scope in scopes {
        let (name, failure) = match scope {
            Scope::Losses => ("losses", run_suite("losses", first, count, suites::LOSS_TOLERANCE, suites::losses)?),
            Scope::Gate => ("gate", run_suite("gate", first, count, suites::GATE_TOLERANCE, suites::gate)?),
            Scope::Model => ("model", run_suite("model", first, count, suites::MODEL_TOLERANCE, suites::model)?),
            Scope::All => unreachable!("expanded above"),
        };
        if let Some(w) = failure {
            let (input, coord) = w.report.worst.unwrap_or((0, 0));
            let what = match scope {
                Scope::Gate => gate_inputs.get(input).map(|s| s.to_string()),
                Scope::Model => Model64::new(suites::model_config(w.seed))
                    .ok()
                    .and_then(|m| m.params().get(input).map(|p| p.name.clone())),
                _ => None,
            }
            .unwrap_or_else(|| format!("input {input}"));
            failures.push(format!(
                "{name}: seed {}, {what}[{coord}]: analytic {:.9e} vs numeric {:.9e} (rel err {:.3e})",
                w.seed, w.report.analytic_at_worst, w.report.numeric_at_worst, w.report.max_rel_err
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed; worst offender(s): {}", failures.join("; "))))
    }
}

pub fn curve(a: CurveArgs) -> Result<()> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    cfg.check_keys("curve", &["gammas", "resolution", "exponent", "out"])?;
    let gammas = cfg.pick_or("gammas", a.gammas, List(vec![1.0, 4.0 / 3.0, 2.0, 3.0]))?.0;
    let resolution = cfg.pick_or("resolution", a.resolution, 101)?;
    let exponent: FocalExponent = cfg.pick_or("exponent", a.exponent, "as_printed".to_string())?.parse()?;
    let points = focal_curve(&gammas, resolution, exponent)?;
    match cfg.pick::<PathBuf>("out", a.out)? {
        Some(path) => {
            write_curve_csv(&points, create_file(&path)?)?;
            println!("wrote {} points to {}", points.len(), path.display());
        }
        None => write_curve_csv(&points, io::stdout().lock())?,
    }
    Ok(())
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ftseg_core::data::{generate_synthetic, split, split_indices, SplitSpec, SyntheticConfig};
use ftseg_core::gradcheck::suites;
use ftseg_core::loss::{
    dice_score, focal_tversky_loss, tversky_index, tversky_loss, LossConfig, PredictionPair,
};
use ftseg_core::model::ModelConfig;
use ftseg_core::train::{default_grid, format_parameters, run_ablation, Protocol, TrainConfig, DEFAULT_ROWS};
use ftseg_core::Sample64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "loss identities", budget: Duration::from_secs(5), run: loss_identities },
        Criterion { id: 2, name: "hand values", budget: Duration::from_secs(1), run: hand_values },
        Criterion { id: 3, name: "gradient suite", budget: Duration::from_secs(120), run: gradient_suite },
        Criterion { id: 4, name: "false-negative weighting", budget: Duration::from_secs(1), run: fn_weighting },
        Criterion { id: 5, name: "overfit sanity", budget: Duration::from_secs(600), run: overfit },
        Criterion { id: 6, name: "ordering at desk scale", budget: Duration::from_secs(7200), run: ordering },
        Criterion { id: 7, name: "split arithmetic", budget: Duration::from_secs(1), run: split_arithmetic },
        Criterion { id: 8, name: "determinism", budget: Duration::from_secs(600), run: determinism },
        Criterion { id: 9, name: "ablation table shape", budget: Duration::from_secs(1), run: table_shape },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.budget => Err(format!("{detail}; over budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} {}: PASS ({detail}; {:.1}s)", c.id, c.name, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {}: FAIL ({detail}; {:.1}s)", c.id, c.name, took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pair(p: &[f64], g: &[f64]) -> PredictionPair<f64> {
    PredictionPair::from_slices(p, g).expect("valid pair")
}

/// Random probabilities and a mask with at least one foreground pixel.
fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(4..256);
    let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let rate = rng.gen_range(0.02..0.6);
    let mut g: Vec<f64> = (0..n).map(|_| if rng.gen_bool(rate) { 1.0 } else { 0.0 }).collect();
    g[rng.gen_range(0..n)] = 1.0;
    (p, g)
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (p, g) = random_pair(&mut rng);
        let pg = pair(&p, &g);
        let half = LossConfig { alpha: 0.5, beta: 0.5, ..LossConfig::tversky() }.with_epsilon(0.0);
        let ti = tversky_index(&pg, &half).map_err(|e| e.to_string())?;
        let dsc = dice_score(&pg, 0.0).map_err(|e| e.to_string())?;
        worst = worst.max((ti - dsc).abs());

        let alpha = rng.gen_range(0.0..=1.0);
        let unit = LossConfig { alpha, beta: 1.0 - alpha, gamma: 1.0, ..LossConfig::tversky() };
        let ftl = focal_tversky_loss(&pg, &unit).map_err(|e| e.to_string())?;
        let tl = tversky_loss(&pg, &unit).map_err(|e| e.to_string())?;
        check(ftl.to_bits() == tl.to_bits(), || format!("pair {i}: FTL(γ=1) {ftl:e} != TL {tl:e}"))?;
    }
    check(worst < 1e-12, || format!("max |TI - DSC| = {worst:e}"))?;
    Ok(format!("1000 pairs, max |TI - DSC| = {worst:.1e}, FTL(γ=1) bit-identical to TL"))
}

/// Independent scalar form of the Tversky index.
fn oracle_tversky(p: &[f64], g: &[f64], alpha: f64, beta: f64) -> f64 {
    let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
    for (&pi, &gi) in p.iter().zip(g) {
        tp += pi * gi;
        fn_ += (1.0 - pi) * gi;
        fp += pi * (1.0 - gi);
    }
    tp / (tp + alpha * fn_ + beta * fp)
}

fn hand_values() -> Outcome {
    let (p, g) = ([0.6, 0.2, 0.1, 0.1], [1.0, 0.0, 0.0, 0.0]);
    let cfg = LossConfig { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, ..LossConfig::tversky() }.with_epsilon(0.0);
    let pg = pair(&p, &g);
    let ti = tversky_index(&pg, &cfg).map_err(|e| e.to_string())?;
    let ftl = focal_tversky_loss(&pg, &cfg).map_err(|e| e.to_string())?;
    let oracle_ti = oracle_tversky(&p, &g, 0.7, 0.3);
    let oracle_ftl = (1.0 - oracle_ti).powf(1.0 / (4.0 / 3.0));
    check((ti - 0.6).abs() < 1e-12 && (ti - oracle_ti).abs() < 1e-12, || format!("TI = {ti}, oracle {oracle_ti}"))?;
    check((ftl - 0.502973).abs() <= 1e-6 && (ftl - oracle_ftl).abs() < 1e-12, || {
        format!("FTL = {ftl}, oracle {oracle_ftl}")
    })?;
    Ok(format!("TI = {ti:.6}, FTL = {ftl:.6}"))
}

fn gradient_suite() -> Outcome {
    let suites: [(&str, fn(u64) -> ftseg_core::Result<ftseg_core::gradcheck::GradReport>, f64); 3] = [
        ("losses", suites::losses, 1e-4),
        ("gate", suites::gate, 1e-4),
        ("model", suites::model, 1e-3),
    ];
    let mut parts = Vec::new();
    for (name, suite, tol) in suites {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 0..100 {
            let r = suite(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            check(r.pass && r.max_rel_err < tol, || {
                format!("{name} seed {seed}: max rel err {:.3e} at {:?}", r.max_rel_err, r.worst)
            })?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
        parts.push(format!("{name} {worst:.2e} over {checked} coords"));
    }
    Ok(format!("100 seeds: {}", parts.join(", ")))
}

fn fn_weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = LossConfig { alpha: 0.7, beta: 0.3, ..LossConfig::tversky() };
    let mut min_gap = f64::INFINITY;
    for i in 0..100 {
        let (p, g) = random_pair(&mut rng);
        let fg: Vec<usize> = (0..g.len()).filter(|&j| g[j] == 1.0).collect();
        let bg: Vec<usize> = (0..g.len()).filter(|&j| g[j] == 0.0).collect();
        if bg.is_empty() {
            continue;
        }
        // Fixed pair: p nudged halfway toward the truth, so there is room
        // to move mass either way.
        let base: Vec<f64> = p.iter().zip(&g).map(|(&pi, &gi)| 0.5 * (pi + gi)).collect();
        let room_fn: f64 = fg.iter().map(|&j| base[j]).sum();
        let room_fp: f64 = bg.iter().map(|&j| 1.0 - base[j]).sum();
        let mass = rng.gen_range(0.1..0.9) * room_fn.min(room_fp);

        let mut with_fn = base.clone();
        for &j in &fg {
            with_fn[j] -= mass * base[j] / room_fn;
        }
        let mut with_fp = base.clone();
        for &j in &bg {
            with_fp[j] += mass * (1.0 - base[j]) / room_fp;
        }
        let l_fn = tversky_loss(&pair(&with_fn, &g), &cfg).map_err(|e| e.to_string())?;
        let l_fp = tversky_loss(&pair(&with_fp, &g), &cfg).map_err(|e| e.to_string())?;
        check(l_fn > l_fp, || format!("construction {i}: TL(FN) {l_fn} <= TL(FP) {l_fp}"))?;
        min_gap = min_gap.min(l_fn - l_fp);
    }
    Ok(format!("100 constructions, min TL(FN) - TL(FP) = {min_gap:.3e}"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ftseg")
}

/// Runs the CLI and returns stdout; non-zero exit is an error.
fn ftseg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "ftseg {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn read_metric(csv: &Path, column: &str) -> Result<f64, String> {
    let text = fs::read_to_string(csv).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty metrics file")?.split(',').collect();
    let row: Vec<&str> = lines.next().ok_or("metrics file has no row")?.split(',').collect();
    let i = header.iter().position(|h| *h == column).ok_or(format!("no column {column}"))?;
    row[i].parse().map_err(|e| format!("{column}: {e}"))
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (data, run, eval) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"));
    ftseg(&["synth", "--out", p(&data), "--count", "4", "--seed", "3"])?;
    ftseg(&[
        "train", "--data", p(&data), "--out", p(&run),
        "--variant", "attn_unet_multi_input", "--depth", "4", "--base-channels", "8",
        "--train-fraction", "1", "--epochs", "500", "--batch", "4",
        "--lr", "0.02", "--clip", "1", "--seed", "0",
    ])?;
    let ckpt = run.join("model.ckpt");
    ftseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval)])?;
    let dice = read_metric(&eval.join("metrics.csv"), "dice_mean")?;
    check(dice >= 0.95, || format!("final-head dice {dice:.4} after 500 steps"))?;
    Ok(format!("final-head dice {dice:.4} after 500 steps"))
}

/// Rows of the ordering experiment and the settings they share.
fn ordering() -> Outcome {
    let data: Vec<Sample64> = generate_synthetic(&SyntheticConfig::bus_like(250, 11)).map_err(|e| e.to_string())?;
    let split_spec = SplitSpec { train_fraction: 0.8, folds: 5, seed: 0 };
    let (train_set, test) = split(&data, &split_spec).map_err(|e| e.to_string())?;
    check(train_set.len() == 200 && test.len() == 50, || format!("split {}/{}", train_set.len(), test.len()))?;

    let base_model = ModelConfig { depth: 4, base_channels: 8, ..ModelConfig::default() };
    let base_train = TrainConfig {
        learning_rate: 0.02,
        epochs: 20,
        batch_size: 8,
        clip_norm: Some(1.0),
        ..TrainConfig::default()
    };
    let wanted = ["unet+dl", "unet+ftl", "attn_multi+ftl"];
    let grid: Vec<_> = default_grid(&base_model, &base_train)
        .into_iter()
        .filter(|r| wanted.contains(&r.label.as_str()))
        .collect();
    let protocol = Protocol::Holdout { split: split_spec, seeds: vec![1, 2, 3] };
    let results = run_ablation(&data, &grid, &protocol, 1).map_err(|e| e.to_string())?;
    let by: BTreeMap<&str, _> = results.iter().map(|r| (r.label.as_str(), &r.summary.metrics)).collect();
    let (unet_dl, unet_ftl, attn_ftl) = (by["unet+dl"], by["unet+ftl"], by["attn_multi+ftl"]);

    let summary = format!(
        "recall unet+ftl {:.4} vs unet+dl {:.4}; dice attn_multi+ftl {:.4} vs unet+dl {:.4}",
        unet_ftl.recall.mean, unet_dl.recall.mean, attn_ftl.dice.mean, unet_dl.dice.mean
    );
    let a = unet_ftl.recall.mean >= unet_dl.recall.mean;
    let b = attn_ftl.dice.mean - unet_dl.dice.mean >= 0.03;
    check(a && b, || format!("(a) {} (b) {}: {summary}", verdict(a), verdict(b)))?;
    Ok(summary)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "fails"
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn split_arithmetic() -> Outcome {
    for seed in 0..10 {
        let (tr, te) = split_indices(163, 0.75, seed).map_err(|e| e.to_string())?;
        check(tr.len() == 123 && te.len() == 40, || format!("seed {seed}: {} / {}", tr.len(), te.len()))?;
    }
    Ok("163 samples at 0.75 -> 123 train / 40 test".into())
}

/// Every regular file below `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let path = e.path();
            if path.is_dir() {
                walk(&path, root, out);
            } else if let Ok(bytes) = fs::read(&path) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.is_file() {
        out.insert(PathBuf::new(), fs::read(root).unwrap_or_default());
    } else {
        walk(root, root, &mut out);
    }
    out
}

/// Runs `args` twice, clearing `output` in between, and compares stdout and
/// every file written.
fn twice(label: &str, args: &[&str], output: Option<&Path>) -> Result<usize, String> {
    let mut runs = Vec::new();
    for _ in 0..2 {
        if let Some(o) = output {
            let _ = fs::remove_dir_all(o);
            let _ = fs::remove_file(o);
        }
        let stdout = ftseg(args)?;
        runs.push((stdout, output.map(snapshot).unwrap_or_default()));
    }
    check(runs[0].0 == runs[1].0, || format!("{label}: stdout differs"))?;
    check(runs[0].1 == runs[1].1, || format!("{label}: output files differ"))?;
    Ok(runs[0].1.len())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let (data, run, eval) = (d.join("data"), d.join("run"), d.join("eval"));
    let (abl1, abl2, curve) = (d.join("abl1.csv"), d.join("abl2.csv"), d.join("curve.csv"));
    let ckpt = run.join("model.ckpt");
    let arch = ["--depth", "3", "--base-channels", "4"];

    let mut files = 0;
    files += twice(
        "synth",
        &["synth", "--out", p(&data), "--count", "10", "--seed", "4", "--height", "32", "--width", "32"],
        Some(&data),
    )?;
    let train_args = [&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--batch", "4", "--seed", "1"][..], &arch].concat();
    files += twice("train", &train_args, Some(&run))?;
    files += twice(
        "eval",
        &["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval), "--overlays", "true"],
        Some(&eval),
    )?;
    let ablate = |out: &Path, jobs: &str| -> Vec<String> {
        let mut v: Vec<String> = ["ablate", "--data", p(&data), "--rows", "unet+dl,attn_multi+ftl"]
            .iter()
            .chain(&["--folds", "2", "--epochs", "1", "--batch", "4", "--jobs", jobs, "--out", p(out)])
            .map(|s| s.to_string())
            .collect();
        v.extend(arch.iter().map(|s| s.to_string()));
        v
    };
    let (a1, a2) = (ablate(&abl1, "1"), ablate(&abl2, "2"));
    files += twice("ablate", &refs(&a1), Some(&abl1))?;
    twice("ablate --jobs 2", &refs(&a2), Some(&abl2))?;
    check(fs::read(&abl1).ok() == fs::read(&abl2).ok(), || "ablate: --jobs 1 and --jobs 2 differ".into())?;
    twice("gradcheck", &["gradcheck", "all", "--seeds", "2"], None)?;
    files += twice("curve", &["curve", "--out", p(&curve)], Some(&curve))?;
    twice("curve stdout", &["curve", "--gammas", "1,2"], None)?;
    Ok(format!("6 subcommands re-run, {files} output files byte-identical, ablate independent of --jobs"))
}

fn table_shape() -> Outcome {
    let grid = default_grid(&ModelConfig::default(), &TrainConfig::default());
    let labels: Vec<&str> = grid.iter().map(|r| r.label.as_str()).collect();
    check(labels == DEFAULT_ROWS, || format!("rows {labels:?}"))?;
    let params: Vec<String> = grid.iter().map(|r| format_parameters(r.train.loss_kind, &r.train.loss)).collect();
    let expected = [
        "α=0.5, β=0.5",
        "α=0.7, β=0.3",
        "α=0.7, β=0.3, γ=4/3",
        "α=0.5, β=0.5",
        "α=0.5, β=0.5",
        "α=0.7, β=0.3",
        "α=0.7, β=0.3, γ=4/3",
    ];
    check(params == expected, || format!("parameters {params:?}"))?;
    Ok(format!("7 rows: {}", labels.join(", ")))
}

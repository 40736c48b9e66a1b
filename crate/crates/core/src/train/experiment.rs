//! Cross-validation, repeated hold-out runs and the ablation grid.
//!
//! Every (configuration, fold) or (configuration, seed) pair is an isolated
//! job: it builds its own model, trains it and scores the held-out test
//! split. Jobs may run on several threads; results are assembled in grid
//! order, so the output does not depend on the thread count.

use std::io::Write;

use rayon::prelude::*;

use super::metrics::{evaluate, Metrics, Scores};
use super::{train, TrainConfig};
use crate::data::{kfold_indices, split_indices, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::model::{Model, ModelConfig, Variant};
use crate::scalar::Scalar;

/// Derives the seed of run `k` from a base seed.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ (k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Split off a test set, then train one model per fold of the training
    /// part (validating on that fold) and score each on the test set.
    CrossValidation(SplitSpec),
    /// Split off a test set and train one model per seed on the whole
    /// training part.
    Holdout { split: SplitSpec, seeds: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub metrics: Metrics,
    /// Test-set scores of each fold or seed, in order.
    pub runs: Vec<Scores>,
}

impl RunSummary {
    fn of(runs: Vec<Scores>) -> Self {
        RunSummary {
            metrics: Metrics::aggregate(&runs),
            runs,
        }
    }
}

struct Job {
    row: usize,
    model: ModelConfig,
    train: TrainConfig,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

fn pick<T: Scalar>(data: &[Sample<T>], idx: &[usize]) -> Vec<Sample<T>> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

fn run_job<T: Scalar>(job: &Job, pool: &[Sample<T>], test: &[Sample<T>]) -> Result<Scores> {
    let mut model = Model::<T>::new(job.model.clone())?;
    train(&mut model, &pick(pool, &job.train_idx), &pick(pool, &job.val_idx), &job.train)?;
    Ok(evaluate(&model, test, 0.5)?.mean)
}

fn run_jobs<T: Scalar>(jobs: &[Job], pool: &[Sample<T>], test: &[Sample<T>], threads: usize) -> Result<Vec<Scores>> {
    if threads <= 1 {
        return jobs.iter().map(|j| run_job(j, pool, test)).collect();
    }
    let tp = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} worker threads: {e}")))?;
    tp.install(|| jobs.par_iter().map(|j| run_job(j, pool, test)).collect())
}

/// Expands rows into jobs and returns the split `(pool, test)` they share.
fn plan<T: Scalar>(
    dataset: &[Sample<T>],
    rows: &[(ModelConfig, TrainConfig)],
    protocol: &Protocol,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>, Vec<Job>)> {
    let spec = match protocol {
        Protocol::CrossValidation(s) => s,
        Protocol::Holdout { split, .. } => split,
    };
    let (tr, te) = split_indices(dataset.len(), spec.train_fraction, spec.seed)?;
    let (pool, test) = (pick(dataset, &tr), pick(dataset, &te));
    let mut jobs = Vec::new();
    match protocol {
        Protocol::CrossValidation(spec) => {
            spec.validate()?;
            let folds = kfold_indices(pool.len(), spec.folds, spec.seed)?;
            for (row, (m, t)) in rows.iter().enumerate() {
                for (f, (train_idx, val_idx)) in folds.iter().enumerate() {
                    jobs.push(Job {
                        row,
                        model: ModelConfig {
                            seed: mix_seed(m.seed, f as u64),
                            ..m.clone()
                        },
                        train: TrainConfig {
                            seed: mix_seed(t.seed, f as u64),
                            ..t.clone()
                        },
                        train_idx: train_idx.clone(),
                        val_idx: val_idx.clone(),
                    });
                }
            }
        }
        Protocol::Holdout { seeds, .. } => {
            if seeds.is_empty() {
                return Err(Error::InvalidConfig("hold-out protocol needs at least one seed".into()));
            }
            for (row, (m, t)) in rows.iter().enumerate() {
                for &seed in seeds {
                    jobs.push(Job {
                        row,
                        model: ModelConfig { seed, ..m.clone() },
                        train: TrainConfig { seed, ..t.clone() },
                        train_idx: (0..pool.len()).collect(),
                        val_idx: Vec::new(),
                    });
                }
            }
        }
    }
    Ok((pool, test, jobs))
}

fn run_rows<T: Scalar>(
    dataset: &[Sample<T>],
    rows: &[(ModelConfig, TrainConfig)],
    protocol: &Protocol,
    threads: usize,
) -> Result<Vec<RunSummary>> {
    let (pool, test, jobs) = plan(dataset, rows, protocol)?;
    let scores = run_jobs(&jobs, &pool, &test, threads)?;
    let mut per_row: Vec<Vec<Scores>> = vec![Vec::new(); rows.len()];
    for (job, s) in jobs.iter().zip(scores) {
        per_row[job.row].push(s);
    }
    Ok(per_row.into_iter().map(RunSummary::of).collect())
}

/// k-fold cross-validation of one configuration; fold `f` mixes `f` into
/// both the model and the training seed.
pub fn cross_validate<T: Scalar>(
    model: &ModelConfig,
    dataset: &[Sample<T>],
    spec: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<RunSummary> {
    let rows = [(model.clone(), cfg.clone())];
    Ok(run_rows(dataset, &rows, &Protocol::CrossValidation(*spec), 1)?.remove(0))
}

/// Trains one model per seed on `train` and scores each on `test`.
pub fn holdout_runs<T: Scalar>(
    model: &ModelConfig,
    train_set: &[Sample<T>],
    test: &[Sample<T>],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<RunSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let jobs: Vec<Job> = seeds
        .iter()
        .map(|&seed| Job {
            row: 0,
            model: ModelConfig { seed, ..model.clone() },
            train: TrainConfig { seed, ..cfg.clone() },
            train_idx: (0..train_set.len()).collect(),
            val_idx: Vec::new(),
        })
        .collect();
    Ok(RunSummary::of(run_jobs(&jobs, train_set, test, 1)?))
}

/// Row labels of the default grid, in table order.
pub const DEFAULT_ROWS: [&str; 7] = [
    "unet+dl",
    "unet+tl",
    "unet+ftl",
    "attn+dl",
    "attn_multi+dl",
    "attn_multi+tl",
    "attn_multi+ftl",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationRow {
    /// Builds a row from a label such as `attn_multi+ftl`. The plain U-Net
    /// has a single head; the attention variants are deeply supervised.
    /// Dice rows use alpha = beta = 0.5, the others alpha = 0.7, beta = 0.3
    /// and gamma = 4/3. Other settings come from the base configurations.
    pub fn from_label(label: &str, base_model: &ModelConfig, base_train: &TrainConfig) -> Result<Self> {
        let (arch, loss) = label
            .split_once('+')
            .ok_or_else(|| Error::InvalidConfig(format!("row label {label:?} is not <model>+<loss>")))?;
        let variant = match arch {
            "unet" => Variant::Unet,
            "attn" => Variant::AttnUnet,
            "attn_multi" => Variant::AttnUnetMultiInput,
            _ => return Err(Error::InvalidConfig(format!("unknown architecture {arch:?} in row {label:?}"))),
        };
        let kind: LossKind = loss.parse()?;
        let preset = match kind {
            LossKind::Dice => LossConfig::dice(),
            LossKind::Tversky | LossKind::FocalTversky => LossConfig::tversky(),
        };
        Ok(AblationRow {
            label: label.to_string(),
            model: ModelConfig {
                variant,
                deep_supervision: variant != Variant::Unet,
                ..base_model.clone()
            },
            train: TrainConfig {
                loss: LossConfig {
                    epsilon: base_train.loss.epsilon,
                    exponent: base_train.loss.exponent,
                    ..preset
                },
                loss_kind: kind,
                ..base_train.clone()
            },
        })
    }
}

/// The seven configurations of the ablation table.
pub fn default_grid(base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<AblationRow> {
    DEFAULT_ROWS
        .iter()
        .map(|l| AblationRow::from_label(l, base_model, base_train).expect("default labels are valid"))
        .collect()
}

fn format_real(v: f64) -> String {
    for den in 1..=12u32 {
        let num = v * den as f64;
        if (num - num.round()).abs() < 1e-3 {
            let num = num.round() as i64;
            return if den == 1 {
                num.to_string()
            } else if den == 10 || den == 2 || den == 5 || den == 4 || den == 8 {
                format!("{}", num as f64 / den as f64)
            } else {
                format!("{num}/{den}")
            };
        }
    }
    format!("{v}")
}

/// `α=0.7, β=0.3` plus `, γ=4/3` for the focal loss.
pub fn format_parameters(kind: LossKind, cfg: &LossConfig) -> String {
    let mut s = format!("α={}, β={}", format_real(cfg.alpha), format_real(cfg.beta));
    if kind == LossKind::FocalTversky {
        s.push_str(&format!(", γ={}", format_real(cfg.gamma)));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub parameters: String,
    pub summary: RunSummary,
}

pub fn run_ablation<T: Scalar>(
    dataset: &[Sample<T>],
    grid: &[AblationRow],
    protocol: &Protocol,
    threads: usize,
) -> Result<Vec<AblationResult>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("ablation grid is empty".into()));
    }
    let rows: Vec<(ModelConfig, TrainConfig)> = grid.iter().map(|r| (r.model.clone(), r.train.clone())).collect();
    let summaries = run_rows(dataset, &rows, protocol, threads)?;
    Ok(grid
        .iter()
        .zip(summaries)
        .map(|(r, summary)| AblationResult {
            label: r.label.clone(),
            parameters: format_parameters(r.train.loss_kind, &r.train.loss),
            summary,
        })
        .collect())
}

/// `model,parameters,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std`
pub fn write_ablation_csv<W: Write>(results: &[AblationResult], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["model", "parameters"];
    header.extend(Metrics::CSV_HEADER);
    w.write_record(&header)?;
    for r in results {
        let mut rec = vec![r.label.clone(), r.parameters.clone()];
        rec.extend(r.summary.metrics.csv_fields());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<ablation output>", e))?;
    Ok(())
}

//! Pixel-level Dice, precision and recall.

use std::io::Write;

use crate::data::{stack, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

const METRIC_EPS: f64 = 1e-8;

/// One image's (or one fold's) scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        Scores {
            dice: 2.0 * tp / (2.0 * tp + fp + fn_ + METRIC_EPS),
            precision: tp / (tp + fp + METRIC_EPS),
            recall: tp / (tp + fn_ + METRIC_EPS),
        }
    }

    /// Scores of a probability map against a binary mask; a pixel is
    /// predicted foreground when its probability exceeds `threshold`.
    pub fn of_prediction<T: Scalar>(prob: &[T], truth: &[T], threshold: f64) -> Self {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &g) in prob.iter().zip(truth) {
            let pred = p.as_f64() > threshold;
            let actual = g == T::one();
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        Scores::from_counts(tp, fp, fn_)
    }

    pub fn mean(all: &[Scores]) -> Scores {
        let n = all.len().max(1) as f64;
        Scores {
            dice: all.iter().map(|s| s.dice).sum::<f64>() / n,
            precision: all.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: all.iter().map(|s| s.recall).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Mean ± std of each metric over folds (or runs, or images).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub n_folds: usize,
}

impl Metrics {
    pub fn aggregate(folds: &[Scores]) -> Self {
        Metrics {
            dice: MeanStd::of(folds.iter().map(|s| s.dice)),
            precision: MeanStd::of(folds.iter().map(|s| s.precision)),
            recall: MeanStd::of(folds.iter().map(|s| s.recall)),
            n_folds: folds.len(),
        }
    }

    pub const CSV_HEADER: [&'static str; 6] = [
        "dice_mean",
        "dice_std",
        "precision_mean",
        "precision_std",
        "recall_mean",
        "recall_std",
    ];

    pub fn csv_fields(&self) -> [String; 6] {
        [
            format!("{:.6}", self.dice.mean),
            format!("{:.6}", self.dice.std),
            format!("{:.6}", self.precision.mean),
            format!("{:.6}", self.precision.std),
            format!("{:.6}", self.recall.mean),
            format!("{:.6}", self.recall.std),
        ]
    }

    /// A header plus one row of [`Metrics::CSV_HEADER`] columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_fields())?;
        w.flush().map_err(|e| Error::io("<metrics output>", e))?;
        Ok(())
    }
}

/// Per-image scores of the final head and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<Scores>,
    pub mean: Scores,
}

impl Evaluation {
    /// Spread over images, for single-model reports.
    pub fn metrics(&self) -> Metrics {
        Metrics {
            n_folds: 1,
            ..Metrics::aggregate(&self.per_image)
        }
    }
}

const EVAL_BATCH: usize = 8;

/// Scores the full-resolution head on every sample.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample<T>], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty sample set".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let heads = model.predict(&x)?;
        let last = heads.last().expect("model has at least one head");
        let plane = y.len() / chunk.len();
        for i in 0..chunk.len() {
            per_image.push(Scores::of_prediction(
                &last.data()[i * plane..(i + 1) * plane],
                &y.data()[i * plane..(i + 1) * plane],
                threshold,
            ));
        }
    }
    let mean = Scores::mean(&per_image);
    Ok(Evaluation { per_image, mean })
}

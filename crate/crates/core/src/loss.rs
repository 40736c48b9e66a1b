//! Overlap losses for binary segmentation: Dice, Tversky and focal Tversky,
//! plus the deep-supervision combiner and the focal curve table.
//!
//! All overlap sums run over every pixel of the batch. The background
//! class is represented by complements: `1 - p` and `1 - g`.
//!
//! Each loss exists in two forms: a tape form (`*_var`) that participates
//! in training, and a value form taking a [`PredictionPair`].

use std::io::Write;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the focal parameter enters the exponent of `(1 - TI)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FocalExponent {
    /// `(1 - TI)^(1/gamma)`.
    #[default]
    AsPrinted,
    /// `(1 - TI)^gamma`.
    Direct,
}

impl FocalExponent {
    pub fn exponent(self, gamma: f64) -> f64 {
        match self {
            FocalExponent::AsPrinted => 1.0 / gamma,
            FocalExponent::Direct => gamma,
        }
    }
}

impl FromStr for FocalExponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(FocalExponent::AsPrinted),
            "direct" => Ok(FocalExponent::Direct),
            _ => Err(Error::InvalidConfig(format!(
                "exponent convention must be as_printed or direct, got {s:?}"
            ))),
        }
    }
}

/// Numerator of the Dice score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiceNumerator {
    /// `2 * sum(p*g) + eps`; a perfect prediction scores 1.
    #[default]
    Doubled,
    /// `sum(p*g) + eps`; a perfect prediction scores 0.5. Not used in training.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    /// Focal parameter, in `[1, 3]`.
    pub gamma: f64,
    pub epsilon: f64,
    pub exponent: FocalExponent,
    pub dice_numerator: DiceNumerator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::tversky()
    }
}

impl LossConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    /// alpha = 0.7, beta = 0.3, gamma = 4/3.
    pub fn tversky() -> Self {
        LossConfig {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
            epsilon: Self::DEFAULT_EPSILON,
            exponent: FocalExponent::AsPrinted,
            dice_numerator: DiceNumerator::Doubled,
        }
    }

    /// alpha = beta = 0.5, gamma = 1.
    pub fn dice() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            ..LossConfig::tversky()
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Zero `epsilon` is accepted so that hand values can be checked
    /// exactly; it is the caller's job to avoid `0/0` then.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must lie in [0,1], got {v}")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        self.validate_gamma()?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn validate_gamma(&self) -> Result<()> {
        validate_gamma(self.gamma)
    }
}

pub(crate) fn validate_gamma(gamma: f64) -> Result<()> {
    if (1.0..=3.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma must lie in [1,3], got {gamma}")))
    }
}

/// Which overlap loss supervises a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Dice,
    Tversky,
    FocalTversky,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Dice => "dl",
            LossKind::Tversky => "tl",
            LossKind::FocalTversky => "ftl",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dl" | "dice" => Ok(LossKind::Dice),
            "tl" | "tversky" => Ok(LossKind::Tversky),
            "ftl" | "focal_tversky" => Ok(LossKind::FocalTversky),
            _ => Err(Error::InvalidConfig(format!("loss must be dl, tl or ftl, got {s:?}"))),
        }
    }
}

/// Foreground probabilities and binary ground truth of identical shape.
#[derive(Clone, Debug)]
pub struct PredictionPair<T> {
    p: Tensor<T>,
    g: Tensor<T>,
}

impl<T: Scalar> PredictionPair<T> {
    pub fn new(p: Tensor<T>, g: Tensor<T>) -> Result<Self> {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "prediction pair",
                format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(v) = p.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("prediction value {v} outside [0,1]")));
        }
        if let Some(v) = g.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
            return Err(Error::InvalidArgument(format!("ground truth value {v} is not 0 or 1")));
        }
        Ok(PredictionPair { p, g })
    }

    pub fn from_slices(p: &[f64], g: &[f64]) -> Result<Self> {
        let p = Tensor::new(vec![p.len()], p.iter().map(|&v| T::lit(v)).collect())?;
        let g = Tensor::new(vec![g.len()], g.iter().map(|&v| T::lit(v)).collect())?;
        Self::new(p, g)
    }

    pub fn prediction(&self) -> &Tensor<T> {
        &self.p
    }

    pub fn truth(&self) -> &Tensor<T> {
        &self.g
    }

    fn eval(&self, f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>) -> Result<T> {
        let mut tape = Tape::new();
        let p = tape.constant(self.p.clone());
        let g = tape.constant(self.g.clone());
        let out = f(&mut tape, p, g)?;
        tape.value(out).item()
    }
}

/// `sum(p*g)`, `sum((1-p)*g)`, `sum(p*(1-g))`.
fn overlap_terms<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var) -> Result<(Var, Var, Var)> {
    let pg = tape.mul(p, g)?;
    let tp = tape.sum(pg);
    let not_p = tape.affine(p, -T::one(), T::one());
    let not_g = tape.affine(g, -T::one(), T::one());
    let fn_map = tape.mul(not_p, g)?;
    let fn_mass = tape.sum(fn_map);
    let fp_map = tape.mul(p, not_g)?;
    let fp_mass = tape.sum(fp_map);
    Ok((tp, fn_mass, fp_mass))
}

pub fn dice_score_var<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let eps = T::lit(cfg.epsilon);
    let pg = tape.mul(p, g)?;
    let tp = tape.sum(pg);
    let factor = match cfg.dice_numerator {
        DiceNumerator::Doubled => T::lit(2.0),
        DiceNumerator::Single => T::one(),
    };
    let num = tape.affine(tp, factor, eps);
    let sp = tape.sum(p);
    let sg = tape.sum(g);
    let mass = tape.add(sp, sg)?;
    let den = tape.affine(mass, T::one(), eps);
    tape.div(num, den)
}

pub fn dice_loss_var<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let dsc = dice_score_var(tape, p, g, cfg)?;
    Ok(tape.affine(dsc, -T::one(), T::one()))
}

pub fn tversky_index_var<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let eps = T::lit(cfg.epsilon);
    let (tp, fn_mass, fp_mass) = overlap_terms(tape, p, g)?;
    let num = tape.affine(tp, T::one(), eps);
    let wfn = tape.affine(fn_mass, T::lit(cfg.alpha), T::zero());
    let wfp = tape.affine(fp_mass, T::lit(cfg.beta), eps);
    let den = tape.add(tp, wfn)?;
    let den = tape.add(den, wfp)?;
    tape.div(num, den)
}

pub fn tversky_loss_var<T: Scalar>(tape: &mut Tape<T>, p: Var, g: Var, cfg: &LossConfig) -> Result<Var> {
    let ti = tversky_index_var(tape, p, g, cfg)?;
    Ok(tape.affine(ti, -T::one(), T::one()))
}

pub fn focal_tversky_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    g: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate_gamma()?;
    let tl = tversky_loss_var(tape, p, g, cfg)?;
    let base = tape.clamp(tl, T::zero(), T::one());
    tape.pow_scalar(base, T::lit(cfg.exponent.exponent(cfg.gamma)))
}

pub fn loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    kind: LossKind,
    p: Var,
    g: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    match kind {
        LossKind::Dice => dice_loss_var(tape, p, g, cfg),
        LossKind::Tversky => tversky_loss_var(tape, p, g, cfg),
        LossKind::FocalTversky => focal_tversky_loss_var(tape, p, g, cfg),
    }
}

/// Sum of per-head losses, coarsest head first and full resolution last.
///
/// With `kind = FocalTversky` the intermediate heads get the focal loss and
/// the final head the plain Tversky loss, so that the last layer keeps a
/// strong error signal near convergence. Other kinds supervise every head
/// with the same loss. A single head gets the final-head loss only.
pub fn supervised_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    kind: LossKind,
    heads: &[Var],
    targets: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    if heads.is_empty() || heads.len() != targets.len() {
        return Err(Error::shape(
            "deep_supervision_loss",
            format!("{} outputs vs {} targets (need equal, >= 1)", heads.len(), targets.len()),
        ));
    }
    let last = heads.len() - 1;
    let mut total: Option<Var> = None;
    for (s, (&p, &g)) in heads.iter().zip(targets).enumerate() {
        let head_kind = match (kind, s == last) {
            (LossKind::FocalTversky, true) => LossKind::Tversky,
            (k, _) => k,
        };
        let l = loss_var(tape, head_kind, p, g, cfg)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Focal Tversky on every intermediate head, Tversky on the final one.
pub fn deep_supervision_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    targets: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    supervised_loss_var(tape, LossKind::FocalTversky, heads, targets, cfg)
}

pub fn dice_score<T: Scalar>(pair: &PredictionPair<T>, epsilon: f64) -> Result<T> {
    let cfg = LossConfig::dice().with_epsilon(epsilon);
    pair.eval(|t, p, g| dice_score_var(t, p, g, &cfg))
}

pub fn dice_loss<T: Scalar>(pair: &PredictionPair<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    pair.eval(|t, p, g| dice_loss_var(t, p, g, cfg))
}

pub fn tversky_index<T: Scalar>(pair: &PredictionPair<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    pair.eval(|t, p, g| tversky_index_var(t, p, g, cfg))
}

pub fn tversky_loss<T: Scalar>(pair: &PredictionPair<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    pair.eval(|t, p, g| tversky_loss_var(t, p, g, cfg))
}

pub fn focal_tversky_loss<T: Scalar>(pair: &PredictionPair<T>, cfg: &LossConfig) -> Result<T> {
    cfg.validate()?;
    pair.eval(|t, p, g| focal_tversky_loss_var(t, p, g, cfg))
}

/// Value form of [`deep_supervision_loss_var`].
pub fn deep_supervision_loss<T: Scalar>(
    outputs: &[PredictionPair<T>],
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let mut heads = Vec::with_capacity(outputs.len());
    let mut targets = Vec::with_capacity(outputs.len());
    for pair in outputs {
        heads.push(tape.constant(pair.p.clone()));
        targets.push(tape.constant(pair.g.clone()));
    }
    let out = deep_supervision_loss_var(&mut tape, &heads, &targets, cfg)?;
    tape.value(out).item()
}

/// One sample of the focal loss as a function of the Tversky index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub tversky_index: f64,
    pub gamma: f64,
    pub loss: f64,
}

/// Tabulates `(1 - TI)^e` for each gamma on `resolution` evenly spaced TI
/// values covering `[0, 1]` inclusive.
pub fn focal_curve(gammas: &[f64], resolution: usize, exponent: FocalExponent) -> Result<Vec<CurvePoint>> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "curve resolution must be at least 2, got {resolution}"
        )));
    }
    for &g in gammas {
        validate_gamma(g)?;
    }
    let mut out = Vec::with_capacity(gammas.len() * resolution);
    for &gamma in gammas {
        let e = exponent.exponent(gamma);
        for i in 0..resolution {
            let ti = i as f64 / (resolution - 1) as f64;
            let base = (1.0 - ti).clamp(0.0, 1.0);
            let loss = if e == 1.0 { base } else { base.powf(e) };
            out.push(CurvePoint {
                tversky_index: ti,
                gamma,
                loss,
            });
        }
    }
    Ok(out)
}

/// Writes `ti,gamma,loss` rows with six decimals.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["ti", "gamma", "loss"])?;
    for p in points {
        w.write_record([
            format!("{:.6}", p.tversky_index),
            format!("{:.6}", p.gamma),
            format!("{:.6}", p.loss),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curve output>", e))?;
    Ok(())
}

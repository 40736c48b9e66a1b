//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Input index and flat coordinate of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (a ReLU sign, max-pool
    /// winner or clamp bound changed), where central differences are not
    /// meaningful.
    pub skipped: usize,
    pub pass: bool,
}

impl GradReport {
    /// Combines reports, keeping the worst offender.
    pub fn merge(self, other: GradReport) -> GradReport {
        let (mut worst, other) = if other.max_rel_err > self.max_rel_err {
            (other, self)
        } else {
            (self, other)
        };
        worst.checked += other.checked;
        worst.skipped += other.skipped;
        worst.pass = worst.pass && other.pass;
        worst
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Objective value and branch signature.
fn eval<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?.as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck objective evaluated to {v}")));
    }
    Ok((v, tape.branch_signature()))
}

/// Checks `f` against central differences with respect to several inputs.
///
/// `coords[i]` selects which flat coordinates of input `i` are perturbed;
/// `None` checks every coordinate of every input. Coordinates whose
/// perturbation changes the branch signature of the tape are counted in
/// [`GradReport::skipped`] instead of being compared.
pub fn gradcheck_multi<T: Scalar, F>(
    f: F,
    inputs: &[Tensor<T>],
    coords: Option<&[Vec<usize>]>,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in [1e-6, 1e-4], got {h}"
        )));
    }
    if let Some(c) = coords {
        if c.len() != inputs.len() {
            return Err(Error::InvalidArgument(
                "one coordinate list per input is required".into(),
            ));
        }
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item()?.as_f64();
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck objective evaluated to {f0}")));
    }
    let base = tape.branch_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    drop(tape);

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        skipped: 0,
        pass: true,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let which: &[usize] = match coords {
            Some(c) => &c[idx],
            None => {
                all = (0..input.len()).collect();
                &all
            }
        };
        for &i in which {
            let orig = input.data()[i];
            work[idx].data_mut()[i] = orig + T::lit(h);
            let (plus, sig_plus) = eval(&f, &work)?;
            work[idx].data_mut()[i] = orig - T::lit(h);
            let (minus, sig_minus) = eval(&f, &work)?;
            work[idx].data_mut()[i] = orig;
            if sig_plus != base || sig_minus != base {
                report.skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].data()[i].as_f64();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((idx, i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.pass = report.max_rel_err < tol && (report.checked > 0 || report.skipped == 0);
    Ok(report)
}

/// Single-input form of [`gradcheck_multi`] over every coordinate of `x`.
pub fn gradcheck<T: Scalar, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    gradcheck_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), None, h, tol)
}


/// Seeded finite-difference suites over the losses, the attention gate and
/// the full model, shared by the command-line tool and the test suites.
pub mod suites {
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{gradcheck_multi, GradReport};
    use crate::autodiff::{Tape, Var};
    use crate::error::Result;
    use crate::loss::{loss_var, supervised_loss_var, LossConfig, LossKind};
    use crate::model::{attention_gate, AttentionGateParams, GateVars, Model, ModelConfig, Variant};
    use crate::tensor::Tensor;
    use crate::train::{batch_loss_on_tape, TrainConfig};

    /// Finite-difference steps. Larger steps shrink the cancellation error
    /// of `f(x+h) - f(x-h)`, which dominates for near-zero gradients.
    pub const LOSS_STEP: f64 = 1e-6;
    pub const GATE_STEP: f64 = 1e-5;
    pub const MODEL_STEP: f64 = 1e-4;
    pub const LOSS_TOLERANCE: f64 = 1e-4;
    pub const GATE_TOLERANCE: f64 = 1e-4;
    pub const MODEL_TOLERANCE: f64 = 1e-3;

    fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn binary(rng: &mut ChaCha8Rng, shape: Vec<usize>, p: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
    }

    /// Dice, Tversky and focal Tversky losses, single-head and deeply
    /// supervised, with respect to the predictions.
    pub fn losses(seed: u64) -> Result<GradReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = rng.gen_range(0.1..0.9);
        let cfg = LossConfig {
            alpha,
            beta: 1.0 - alpha,
            gamma: rng.gen_range(1.0..3.0),
            ..LossConfig::tversky()
        };
        let p = uniform(&mut rng, vec![2, 1, 4, 4], 0.05, 0.95);
        let g = binary(&mut rng, vec![2, 1, 4, 4], 0.3);
        let p_coarse = uniform(&mut rng, vec![2, 1, 2, 2], 0.05, 0.95);
        let g_coarse = binary(&mut rng, vec![2, 1, 2, 2], 0.5);

        let mut report: Option<GradReport> = None;
        for kind in [LossKind::Dice, LossKind::Tversky, LossKind::FocalTversky] {
            let single = gradcheck_multi(
                |tape: &mut Tape<f64>, v: &[Var]| {
                    let t = tape.constant(g.clone());
                    loss_var(tape, kind, v[0], t, &cfg)
                },
                std::slice::from_ref(&p),
                None,
                LOSS_STEP,
                LOSS_TOLERANCE,
            )?;
            let deep = gradcheck_multi(
                |tape: &mut Tape<f64>, v: &[Var]| {
                    let t0 = tape.constant(g_coarse.clone());
                    let t1 = tape.constant(g.clone());
                    supervised_loss_var(tape, kind, &[v[0], v[1]], &[t0, t1], &cfg)
                },
                &[p_coarse.clone(), p.clone()],
                None,
                LOSS_STEP,
                LOSS_TOLERANCE,
            )?;
            let merged = single.merge(deep);
            report = Some(match report {
                None => merged,
                Some(r) => r.merge(merged),
            });
        }
        Ok(report.expect("three loss kinds checked"))
    }

    /// A gate with random inputs and parameters; the objective weights the
    /// gated features by fixed random coefficients.
    pub fn gate(seed: u64) -> Result<GradReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cx, cg, inter) = (4, 6, 2);
        let x = uniform(&mut rng, vec![1, cx, 8, 8], -1.0, 1.0);
        let g = uniform(&mut rng, vec![1, cg, 4, 4], -1.0, 1.0);
        let mut p = AttentionGateParams::<f64>::zeros(cx, cg, inter);
        for t in [&mut p.w_x, &mut p.w_g, &mut p.b_g, &mut p.psi, &mut p.b_psi] {
            *t = uniform(&mut rng, t.shape().to_vec(), -1.0, 1.0);
        }
        let weights = uniform(&mut rng, vec![1, cx, 8, 8], -1.0, 1.0);
        let inputs = [x, g, p.w_x, p.w_g, p.b_g, p.psi, p.b_psi];
        gradcheck_multi(
            |tape: &mut Tape<f64>, v: &[Var]| {
                let vars = GateVars {
                    w_x: v[2],
                    w_g: v[3],
                    b_g: v[4],
                    psi: v[5],
                    b_psi: v[6],
                };
                let (gated, _) = attention_gate(tape, v[0], v[1], &vars)?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(gated, w)?;
                Ok(tape.sum(weighted))
            },
            &inputs,
            None,
            GATE_STEP,
            GATE_TOLERANCE,
        )
    }

    /// Configuration of the end-to-end check: the deeply supervised
    /// attention U-Net with an input pyramid, on one 16x16 image.
    pub fn model_config(seed: u64) -> ModelConfig {
        ModelConfig {
            variant: Variant::AttnUnetMultiInput,
            depth: 3,
            base_channels: 4,
            deep_supervision: true,
            input_channels: 1,
            seed,
        }
    }

    /// Coordinates checked per parameter tensor by [`model`].
    pub const MODEL_COORDS_PER_PARAM: usize = 12;

    /// Focal Tversky deep-supervision loss of a seeded model on a random
    /// 1x1x16x16 image and blob mask, against a random subset of every
    /// parameter tensor's coordinates.
    ///
    /// Biases are drawn from `[-0.1, 0.1]` instead of zero: with zero biases
    /// a unit whose receptive field is entirely dead sits exactly on a ReLU
    /// kink, where central differences see a one-sided slope.
    pub fn model(seed: u64) -> Result<GradReport> {
        let mut net = Model::<f64>::new(model_config(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        for p in net.params_mut() {
            if p.value.shape().len() == 1 {
                let shape = p.value.shape().to_vec();
                p.value = uniform(&mut rng, shape, -0.1, 0.1);
            }
        }
        let x = uniform(&mut rng, vec![1, 1, 16, 16], 0.0, 1.0);
        let (cy, cx, r) = (rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0), rng.gen_range(2.0..4.0));
        let mask = Tensor::from_fn(vec![1, 1, 16, 16], |i| {
            let (y, xx) = ((i / 16) as f64 + 0.5, (i % 16) as f64 + 0.5);
            if (y - cy).powi(2) + (xx - cx).powi(2) <= r * r {
                1.0
            } else {
                0.0
            }
        });
        let cfg = TrainConfig::default();
        let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
        let coords: Vec<Vec<usize>> = inputs
            .iter()
            .map(|t| {
                let k = MODEL_COORDS_PER_PARAM.min(t.len());
                let mut c = sample(&mut rng, t.len(), k).into_vec();
                c.sort_unstable();
                c
            })
            .collect();
        gradcheck_multi(
            |tape: &mut Tape<f64>, v: &[Var]| batch_loss_on_tape(tape, &net, v, &x, &mask, &cfg),
            &inputs,
            Some(&coords),
            MODEL_STEP,
            MODEL_TOLERANCE,
        )
    }
}

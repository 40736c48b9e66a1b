use ftseg_core::loss::{
    deep_supervision_loss, dice_loss, dice_score, focal_curve, focal_tversky_loss, tversky_index, tversky_loss,
    FocalExponent, LossConfig, PredictionPair,
};
use proptest::prelude::*;

/// Plain scalar formulas, independent of the tape.
mod oracle {
    pub fn terms(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
        let mut tp = 0.0;
        let mut fn_ = 0.0;
        let mut fp = 0.0;
        for (&pi, &gi) in p.iter().zip(g) {
            tp += pi * gi;
            fn_ += (1.0 - pi) * gi;
            fp += pi * (1.0 - gi);
        }
        (tp, fn_, fp)
    }

    pub fn tversky(p: &[f64], g: &[f64], alpha: f64, beta: f64, eps: f64) -> f64 {
        let (tp, fn_, fp) = terms(p, g);
        (tp + eps) / (tp + alpha * fn_ + beta * fp + eps)
    }

    pub fn dice(p: &[f64], g: &[f64], eps: f64) -> f64 {
        let (tp, _, _) = terms(p, g);
        let sp: f64 = p.iter().sum();
        let sg: f64 = g.iter().sum();
        (2.0 * tp + eps) / (sp + sg + eps)
    }
}

fn cfg(alpha: f64, beta: f64, gamma: f64, eps: f64) -> LossConfig {
    LossConfig {
        alpha,
        beta,
        gamma,
        epsilon: eps,
        ..LossConfig::tversky()
    }
}

/// Probabilities and a binary mask with at least one foreground pixel.
fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY, n),
            0..n,
        )
            .prop_map(|(p, g, forced)| {
                let g = g
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| if b || i == forced { 1.0 } else { 0.0 })
                    .collect();
                (p, g)
            })
    })
}

#[test]
fn canonical_example_matches_oracle() {
    let (p, g) = ([0.6, 0.2, 0.1, 0.1], [1.0, 0.0, 0.0, 0.0]);
    let pair = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
    let c = cfg(0.7, 0.3, 4.0 / 3.0, 0.0);
    let ti = tversky_index(&pair, &c).unwrap();
    assert!((ti - oracle::tversky(&p, &g, 0.7, 0.3, 0.0)).abs() < 1e-15);
    assert!((ti - 0.6).abs() < 1e-12);
    let ftl = focal_tversky_loss(&pair, &c).unwrap();
    assert!((ftl - 0.4f64.powf(0.75)).abs() < 1e-12);
    assert!((ftl - 0.502973).abs() < 1e-6);
    let direct = focal_tversky_loss(&pair, &LossConfig { exponent: FocalExponent::Direct, ..c }).unwrap();
    assert!((direct - 0.4f64.powf(4.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn deep_supervision_sums_focal_heads_and_tversky_final() {
    let coarse = PredictionPair::<f64>::from_slices(&[0.6, 0.2, 0.1, 0.1], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let fine = PredictionPair::<f64>::from_slices(&[0.6, 0.2, 0.1, 0.1], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let c = cfg(0.7, 0.3, 4.0 / 3.0, 0.0);
    let total = deep_supervision_loss(&[coarse, fine], &c).unwrap();
    assert!((total - (0.4f64.powf(0.75) + 0.4)).abs() < 1e-12);
    assert!((total - 0.902973).abs() < 1e-6);
}

#[test]
fn focal_curve_shape() {
    let pts = focal_curve(&[1.0, 3.0], 11, FocalExponent::AsPrinted).unwrap();
    for p in pts.iter().filter(|p| p.gamma == 1.0) {
        assert_eq!(p.loss, 1.0 - p.tversky_index);
    }
    let mid = pts.iter().find(|p| p.gamma == 3.0 && (p.tversky_index - 0.5).abs() < 1e-12).unwrap();
    assert!((mid.loss - 0.79370).abs() < 1e-5);
    assert!(focal_curve(&[5.0], 11, FocalExponent::AsPrinted).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tversky_half_half_is_dice((p, g) in pair_strategy()) {
        let pair = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
        let ti = tversky_index(&pair, &cfg(0.5, 0.5, 1.0, 0.0)).unwrap();
        let dsc = dice_score(&pair, 0.0).unwrap();
        prop_assert!((ti - dsc).abs() < 1e-12, "ti {} dsc {}", ti, dsc);
        prop_assert!((dsc - oracle::dice(&p, &g, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_with_unit_gamma_is_tversky_bit_exact((p, g) in pair_strategy(), alpha in 0.0f64..=1.0) {
        let pair = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
        let c = cfg(alpha, 1.0 - alpha, 1.0, LossConfig::DEFAULT_EPSILON);
        let ftl = focal_tversky_loss(&pair, &c).unwrap();
        let tl = tversky_loss(&pair, &c).unwrap();
        prop_assert_eq!(ftl.to_bits(), tl.to_bits());
        let direct = focal_tversky_loss(&pair, &LossConfig { exponent: FocalExponent::Direct, ..c }).unwrap();
        prop_assert_eq!(direct.to_bits(), tl.to_bits());
    }

    #[test]
    fn values_match_oracle_and_ranges((p, g) in pair_strategy(), alpha in 0.0f64..=1.0, gamma in 1.0f64..=3.0) {
        let pair = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
        let eps = LossConfig::DEFAULT_EPSILON;
        let c = cfg(alpha, 1.0 - alpha, gamma, eps);
        let ti = tversky_index(&pair, &c).unwrap();
        prop_assert!((ti - oracle::tversky(&p, &g, alpha, 1.0 - alpha, eps)).abs() < 1e-12);
        prop_assert!(ti > 0.0 && ti <= 1.0);
        let ftl = focal_tversky_loss(&pair, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&ftl));
        prop_assert!((ftl - (1.0 - ti).max(0.0).powf(1.0 / gamma)).abs() < 1e-12);
        let dl = dice_loss(&pair, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&dl));
    }

    /// With alpha > beta, turning some probability mass into false negatives
    /// costs more than turning the same mass into false positives.
    #[test]
    fn false_negatives_weigh_more((p, g) in pair_strategy(), frac in 0.05f64..0.95) {
        let c = cfg(0.7, 0.3, 4.0 / 3.0, LossConfig::DEFAULT_EPSILON);
        // Start from a perfect prediction, then remove `frac` of the
        // foreground mass (FN) or add the same mass on background (FP).
        let fg = g.iter().filter(|&&v| v == 1.0).count() as f64;
        let bg = g.len() as f64 - fg;
        prop_assume!(bg >= 1.0);
        let mass = frac * fg.min(bg);
        let fn_p: Vec<f64> = g.iter().map(|&v| if v == 1.0 { 1.0 - mass / fg } else { 0.0 }).collect();
        let fp_p: Vec<f64> = g.iter().map(|&v| if v == 1.0 { 1.0 } else { mass / bg }).collect();
        let l_fn = tversky_loss(&PredictionPair::<f64>::from_slices(&fn_p, &g).unwrap(), &c).unwrap();
        let l_fp = tversky_loss(&PredictionPair::<f64>::from_slices(&fp_p, &g).unwrap(), &c).unwrap();
        prop_assert!(l_fn > l_fp, "fn {} fp {}", l_fn, l_fp);
        let _ = p;
    }

    /// Moving any prediction toward the ground truth never raises the loss.
    #[test]
    fn losses_monotone_toward_truth((p, g) in pair_strategy(), i in 0usize..64, step in 0.0f64..=1.0) {
        let i = i % p.len();
        let mut q = p.clone();
        q[i] += step * (g[i] - p[i]);
        let c = cfg(0.7, 0.3, 4.0 / 3.0, LossConfig::DEFAULT_EPSILON);
        let before = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
        let after = PredictionPair::<f64>::from_slices(&q, &g).unwrap();
        prop_assert!(tversky_loss(&after, &c).unwrap() <= tversky_loss(&before, &c).unwrap() + 1e-15);
        prop_assert!(focal_tversky_loss(&after, &c).unwrap() <= focal_tversky_loss(&before, &c).unwrap() + 1e-15);
    }

    /// For TI in (0,1) and gamma > 1 the as-printed focal loss exceeds the
    /// Tversky loss: low-loss examples keep a comparatively larger value.
    #[test]
    fn focal_exceeds_tversky_inside((p, g) in pair_strategy(), gamma in 1.01f64..=3.0) {
        let pair = PredictionPair::<f64>::from_slices(&p, &g).unwrap();
        let c = cfg(0.7, 0.3, gamma, LossConfig::DEFAULT_EPSILON);
        let tl = tversky_loss(&pair, &c).unwrap();
        prop_assume!(tl > 1e-9 && tl < 1.0 - 1e-9);
        prop_assert!(focal_tversky_loss(&pair, &c).unwrap() > tl);
    }
}

#[test]
fn invalid_inputs_rejected() {
    assert!(PredictionPair::<f64>::from_slices(&[0.5, 1.5], &[1.0, 0.0]).is_err());
    assert!(PredictionPair::<f64>::from_slices(&[0.5, 0.5], &[1.0, 0.5]).is_err());
    assert!(PredictionPair::<f64>::from_slices(&[0.5], &[1.0, 0.0]).is_err());
    let pair = PredictionPair::<f64>::from_slices(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    assert!(focal_tversky_loss(&pair, &cfg(0.7, 0.3, 0.5, 1e-6)).is_err());
    assert!(tversky_loss(&pair, &cfg(1.7, 0.3, 1.0, 1e-6)).is_err());
}

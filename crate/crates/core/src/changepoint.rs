//! Online CUSUM / multivariate CUSUM detection over a bank of candidate
//! context models plus a synthetic "new context" alternative.
//!
//! Every known candidate `k` keeps `W_k = max(0, W_k + log p_k(y) - log p_z(y))`
//! where `z` is the active context. The extra statistic `W_new` uses a
//! Gaussian centred `delta` units away from the observation itself, with the
//! active model's covariance, as the alternative hypothesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::scalar::Scalar;

/// How `delta` is turned into a per-dimension mean shift for the new-context
/// alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftScale {
    /// `y_hat = y + delta * diag(Sigma)`.
    #[default]
    Variance,
    /// `y_hat = y + delta * sqrt(diag(Sigma))`, i.e. delta standard deviations.
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Detection threshold `h`; `inf` disables detection.
    pub threshold: f64,
    /// Minimum meaningful mean shift `delta` for the new-context statistic.
    pub delta: f64,
    /// False-alarm rate the threshold was derived from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub shift: ShiftScale,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 100.0,
            delta: 2.5,
            alpha: None,
            shift: ShiftScale::Variance,
        }
    }
}

impl DetectorConfig {
    pub fn new(threshold: f64, delta: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            delta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Threshold derived as `h = |ln alpha|`.
    pub fn from_alpha(alpha: f64, delta: f64) -> Result<Self> {
        let cfg = Self {
            threshold: threshold_from_alpha(alpha)?,
            delta,
            alpha: Some(alpha),
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_shift(mut self, shift: ShiftScale) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be a positive finite number, got {}", self.delta)));
        }
        if let Some(a) = self.alpha {
            let h = threshold_from_alpha(a)?;
            if (h - self.threshold).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::Config(format!(
                    "threshold {} disagrees with |ln alpha| = {h}",
                    self.threshold
                )));
            }
        }
        Ok(())
    }

    pub fn detection_enabled(&self) -> bool {
        self.threshold.is_finite()
    }
}

/// `h = |ln alpha|`, which bounds the false-alarm rate by `alpha`.
pub fn threshold_from_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(alpha.ln().abs())
}

/// Page's recursion `max(0, W + L)`.
#[inline]
pub fn cusum_update<S: Scalar>(w_prev: S, llr: S) -> S {
    (w_prev + llr).max(S::zero())
}

/// `log p_new(y)` where `p_new = N(y_hat, Sigma_z)` and `y_hat` is `y`
/// shifted by `delta` along every dimension.
pub fn new_context_likelihood<S: Scalar>(
    current: &DiagonalGaussian<S>,
    y: &[S],
    delta: S,
    shift: ShiftScale,
) -> Result<S> {
    if delta < S::zero() {
        return Err(Error::Domain(format!("delta must be >= 0, got {delta}")));
    }
    let shifted: Vec<S> = y
        .iter()
        .zip(current.variance())
        .map(|(&yi, &v)| match shift {
            ShiftScale::Variance => yi + delta * v,
            ShiftScale::StdDev => yi + delta * v.sqrt(),
        })
        .collect();
    let alt = DiagonalGaussian::new(shifted, current.variance().to_vec())?;
    alt.log_density(y)
}

/// `h / KL`, the asymptotic worst-case expected detection delay.
pub fn predicted_worst_delay(threshold: f64, kl: f64) -> Result<f64> {
    if !(kl > 0.0) {
        return Err(Error::Domain(format!("KL divergence must be > 0, got {kl}")));
    }
    Ok(threshold / kl)
}

/// Outcome of [`CusumBank::decide`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextChoice {
    Known(usize),
    New,
}

/// Per-step likelihood evidence gathered by [`CusumBank::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct LlrRecord<S> {
    /// `log p_k(y)` for every known candidate.
    pub log_likelihood: Vec<S>,
    pub log_likelihood_new: S,
    /// `log p_k(y) - log p_z(y)`.
    pub llr: Vec<S>,
    pub llr_new: S,
    pub x: Vec<S>,
    pub y: Vec<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    /// Step at which a statistic crossed the threshold.
    pub gamma: u64,
    pub previous: usize,
    pub selected: ContextChoice,
    /// Context id actually activated (the freshly allocated id for `New`).
    pub activated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_point: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<u64>,
}

impl DetectionEvent {
    /// Attaches a known true change point; delay is only defined when the
    /// detection does not precede it.
    pub fn with_change_point(mut self, c: u64) -> Self {
        self.change_point = Some(c);
        self.delay = self.gamma.checked_sub(c);
        self
    }
}

/// MCUSUM statistics for contexts `0..K` plus the new-context hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumBank<S> {
    w: Vec<S>,
    w_new: S,
    current: usize,
}

impl<S: Scalar> CusumBank<S> {
    pub fn new(known: usize, current: usize) -> Result<Self> {
        if current >= known {
            return Err(Error::InvalidContext { id: current, known });
        }
        Ok(Self {
            w: vec![S::zero(); known],
            w_new: S::zero(),
            current,
        })
    }

    pub fn known(&self) -> usize {
        self.w.len()
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn statistics(&self) -> &[S] {
        &self.w
    }

    pub fn statistic(&self, k: usize) -> S {
        self.w[k]
    }

    pub fn new_statistic(&self) -> S {
        self.w_new
    }

    /// Registers one more known context with `W = 0`; returns its id.
    pub fn add_candidate(&mut self) -> usize {
        self.w.push(S::zero());
        self.w.len() - 1
    }

    pub fn set_current(&mut self, k: usize) -> Result<()> {
        if k >= self.w.len() {
            return Err(Error::InvalidContext {
                id: k,
                known: self.w.len(),
            });
        }
        self.current = k;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.w.iter_mut().for_each(|w| *w = S::zero());
        self.w_new = S::zero();
    }

    /// One MCUSUM step. `predictions[k]` is candidate `k`'s predictive
    /// distribution for this observation.
    pub fn update(
        &mut self,
        predictions: &[DiagonalGaussian<S>],
        x: &[S],
        y: &[S],
        cfg: &DetectorConfig,
    ) -> Result<LlrRecord<S>> {
        let current = predictions
            .get(self.current)
            .ok_or(Error::MissingPrediction(self.current))?;
        if predictions.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                context: "candidate predictions",
                expected: self.w.len(),
                actual: predictions.len(),
            });
        }
        let log_likelihood = predictions
            .iter()
            .map(|p| p.log_density(y))
            .collect::<Result<Vec<_>>>()?;
        let base = log_likelihood[self.current];
        let log_likelihood_new =
            new_context_likelihood(current, y, S::lit(cfg.delta), cfg.shift)?;

        let llr: Vec<S> = log_likelihood
            .iter()
            .enumerate()
            .map(|(k, &ll)| if k == self.current { S::zero() } else { ll - base })
            .collect();
        let llr_new = log_likelihood_new - base;
        for (w, &l) in self.w.iter_mut().zip(&llr) {
            *w = cusum_update(*w, l);
        }
        self.w_new = cusum_update(self.w_new, llr_new);

        Ok(LlrRecord {
            log_likelihood,
            log_likelihood_new,
            llr,
            llr_new,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }

    /// Most likely context given the statistics: the argmax over candidates
    /// whose statistic exceeds `threshold`, else `None` (keep the previous
    /// context). Ties go to the lowest existing id, and existing contexts win
    /// ties against `New`.
    pub fn decide(&self, threshold: f64) -> Option<ContextChoice> {
        let h = S::from_f64(threshold).unwrap_or_else(S::infinity);
        let mut best: Option<(ContextChoice, S)> = None;
        for (k, &w) in self.w.iter().enumerate() {
            if w > h && best.map_or(true, |(_, b)| w > b) {
                best = Some((ContextChoice::Known(k), w));
            }
        }
        if self.w_new > h && best.map_or(true, |(_, b)| self.w_new > b) {
            best = Some((ContextChoice::New, self.w_new));
        }
        best.map(|(c, _)| c)
    }

    /// Context to use at this step, given the previous one.
    pub fn decide_context(&self, cfg: &DetectorConfig, previous: usize) -> ContextChoice {
        self.decide(cfg.threshold)
            .unwrap_or(ContextChoice::Known(previous))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(mean: f64) -> DiagonalGaussian<f64> {
        DiagonalGaussian::new(vec![mean], vec![1.0]).unwrap()
    }

    #[test]
    fn threshold_reference_values() {
        let h = threshold_from_alpha(1e-43).unwrap();
        assert!((h - 99.0115).abs() < 1e-3, "h={h}");
        assert!((threshold_from_alpha((-5.0f64).exp()).unwrap() - 5.0).abs() < 1e-12);
        assert!(threshold_from_alpha(1.0 - 1e-12).unwrap() < 1e-11);
        assert!(threshold_from_alpha(0.0).is_err());
        assert!(threshold_from_alpha(1.0).is_err());
        assert!(threshold_from_alpha(-0.3).is_err());
    }

    #[test]
    fn config_from_alpha_is_consistent() {
        let cfg = DetectorConfig::from_alpha(1e-3, 2.0).unwrap();
        assert!((cfg.threshold - 1e-3f64.ln().abs()).abs() < 1e-12);
        let mut bad = cfg;
        bad.threshold = 3.0;
        assert!(bad.validate().is_err());
        assert!(DetectorConfig::new(0.0, 1.0).is_err());
        assert!(DetectorConfig::new(5.0, 0.0).is_err());
        assert!(!DetectorConfig::new(f64::INFINITY, 1.0).unwrap().detection_enabled());
    }

    #[test]
    fn cusum_update_reference_values() {
        assert_eq!(cusum_update(0.0, -2.0), 0.0);
        assert_eq!(cusum_update(3.0, 1.5), 4.5);
        assert_eq!(cusum_update(0.5, -1.0), 0.0);
    }

    #[test]
    fn new_context_likelihood_reference_values() {
        let y = [0.4];
        // delta = 0: the alternative is centred on y itself.
        let fit = unit(0.4);
        let l0 = new_context_likelihood(&fit, &y, 0.0, ShiftScale::Variance).unwrap();
        assert!((l0 - fit.log_density(&y).unwrap()).abs() < 1e-12);
        // Perfectly fitting model, delta = 2: log N(y; y+2, 1) - log N(y; y, 1) = -2.
        let l = new_context_likelihood(&fit, &y, 2.0, ShiftScale::Variance).unwrap();
        assert!((l - fit.log_density(&y).unwrap() + 2.0).abs() < 1e-12);
        // Model mean 4 away: -2 - (-8) = +6.
        let off = unit(4.4);
        let l = new_context_likelihood(&off, &y, 2.0, ShiftScale::Variance).unwrap();
        assert!((l - off.log_density(&y).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn shift_scales_differ_off_unit_variance() {
        let p = DiagonalGaussian::<f64>::new(vec![0.0], vec![0.25]).unwrap();
        let y = [0.0];
        let base = p.log_density(&y).unwrap();
        let var = new_context_likelihood(&p, &y, 2.0, ShiftScale::Variance).unwrap() - base;
        let sd = new_context_likelihood(&p, &y, 2.0, ShiftScale::StdDev).unwrap() - base;
        // Variance form: -(2 * 0.25)^2 / (2 * 0.25) = -0.5; std form: -2.
        assert!((var + 0.5).abs() < 1e-12);
        assert!((sd + 2.0).abs() < 1e-12);
    }

    #[test]
    fn worst_delay_reference_values() {
        assert_eq!(predicted_worst_delay(100.0, 10.0).unwrap(), 10.0);
        assert_eq!(predicted_worst_delay(5.0, 2.0).unwrap(), 2.5);
        assert!(predicted_worst_delay(5.0, 0.0).is_err());
    }

    #[test]
    fn identical_candidates_leave_bank_unchanged() {
        let cfg = DetectorConfig::new(5.0, 2.0).unwrap();
        let mut bank = CusumBank::<f64>::new(3, 1).unwrap();
        let p = unit(0.0);
        let rec = bank
            .update(&[p.clone(), p.clone(), p.clone()], &[], &[0.0], &cfg)
            .unwrap();
        assert!(rec.llr.iter().all(|&l| l == 0.0));
        assert!(bank.statistics().iter().all(|&w| w == 0.0));
        // W_new gets a negative increment for a perfect fit, so stays clamped.
        assert_eq!(bank.new_statistic(), 0.0);
    }

    #[test]
    fn missing_current_prediction_is_an_error() {
        let cfg = DetectorConfig::default();
        let mut bank = CusumBank::<f64>::new(2, 1).unwrap();
        assert!(matches!(
            bank.update(&[unit(0.0)], &[], &[0.0], &cfg),
            Err(Error::MissingPrediction(1))
        ));
    }

    #[test]
    fn decide_context_rules() {
        let cfg = DetectorConfig::new(10.0, 2.0).unwrap();
        let mut bank = CusumBank::<f64> {
            w: vec![0.0, 3.0],
            w_new: 9.0,
            current: 0,
        };
        assert_eq!(bank.decide_context(&cfg, 0), ContextChoice::Known(0));
        bank.w_new = 11.0;
        assert_eq!(bank.decide_context(&cfg, 0), ContextChoice::New);
        bank.w[1] = 12.0;
        assert_eq!(bank.decide_context(&cfg, 0), ContextChoice::Known(1));
        // Ties favour existing contexts, lowest id first.
        bank.w = vec![0.0, 11.0, 11.0];
        bank.w_new = 11.0;
        assert_eq!(bank.decide_context(&cfg, 0), ContextChoice::Known(1));
    }

    #[test]
    fn reset_zeroes_and_is_idempotent() {
        let cfg = DetectorConfig::new(1.0, 2.0).unwrap();
        let mut bank = CusumBank::<f64> {
            w: vec![0.0, 3.0],
            w_new: 9.0,
            current: 1,
        };
        bank.reset();
        let once = bank.clone();
        bank.reset();
        assert_eq!(bank, once);
        assert!(bank.statistics().iter().all(|&w| w == 0.0));
        assert_eq!(bank.new_statistic(), 0.0);
        assert_eq!(bank.current(), 1);
        assert_eq!(bank.decide_context(&cfg, 1), ContextChoice::Known(1));
    }

    #[test]
    fn evidence_slope_matches_kl() {
        // y ~ N(2, 1) while the bank believes context 0 = N(0, 1); KL = 2.
        let cfg = DetectorConfig::new(f64::INFINITY, 2.0).unwrap();
        let p0 = unit(0.0);
        let p1 = unit(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 200;
        let steps = 200;
        let mut slope = 0.0;
        for _ in 0..trials {
            let mut bank = CusumBank::<f64>::new(2, 0).unwrap();
            for _ in 0..steps {
                let y = p1.sample(&mut rng);
                bank.update(&[p0.clone(), p1.clone()], &[], &y, &cfg).unwrap();
            }
            slope += bank.statistic(1) / steps as f64;
        }
        slope /= trials as f64;
        assert!((slope - 2.0).abs() < 0.1, "slope={slope}");
    }

    proptest! {
        #[test]
        fn statistics_stay_nonnegative_and_current_pinned(
            means in proptest::collection::vec(-3.0f64..3.0, 2..5),
            ys in proptest::collection::vec(-5.0f64..5.0, 1..40),
            current in 0usize..2,
        ) {
            let cfg = DetectorConfig::new(1e9, 2.0).unwrap();
            let preds: Vec<_> = means.iter().map(|&m| unit(m)).collect();
            let mut bank = CusumBank::<f64>::new(preds.len(), current).unwrap();
            for y in ys {
                bank.update(&preds, &[], &[y], &cfg).unwrap();
                prop_assert!(bank.statistics().iter().all(|&w| w >= 0.0));
                prop_assert!(bank.new_statistic() >= 0.0);
                prop_assert_eq!(bank.statistic(current), 0.0);
            }
        }

        #[test]
        fn zero_candidate_does_not_change_decision(
            ws in proptest::collection::vec(0.0f64..20.0, 1..5),
            w_new in 0.0f64..20.0,
            h in 0.1f64..15.0,
        ) {
            let cfg = DetectorConfig::new(h, 2.0).unwrap();
            let bank = CusumBank { w: ws.clone(), w_new, current: 0 };
            let mut grown = bank.clone();
            grown.add_candidate();
            prop_assert_eq!(bank.decide_context(&cfg, 0), grown.decide_context(&cfg, 0));
        }
    }
}

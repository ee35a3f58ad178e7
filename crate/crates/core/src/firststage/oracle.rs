//! Exact posterior of "recording is abnormal" under the simulator's
//! generative model. Used as the ceiling reference for learned arbiters.

use std::f64::consts::PI;

use statrs::function::erf::erf;

use super::simulate::{burst_length, Distribution, SynthConfig};
use super::WindowOutputs;
use crate::error::{Error, Result};
use crate::windower::WindowingConfig;

/// The per-window response channel of [`SynthConfig`].
#[derive(Debug, Clone, Copy)]
pub struct ResponseChannel {
    pub tpr: f64,
    pub fpr: f64,
    pub noise: f64,
    pub high: f64,
    pub low: f64,
}

impl From<&SynthConfig> for ResponseChannel {
    fn from(c: &SynthConfig) -> Self {
        Self {
            tpr: c.window_tpr,
            fpr: c.window_fpr,
            noise: c.response_noise,
            high: c.response_high,
            low: c.response_low,
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl ResponseChannel {
    /// Density (or point mass when noiseless) of response `x` around `base`.
    fn level_density(&self, x: f64, base: f64) -> f64 {
        if self.noise == 0.0 {
            return if (x - base).abs() < 1e-9 { 1.0 } else { 0.0 };
        }
        if !(x > 0.0 && x < 1.0) {
            return 0.0;
        }
        let s = self.noise;
        let z = (x - base) / s;
        let mass = std_normal_cdf((1.0 - base) / s) - std_normal_cdf(-base / s);
        (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * s * mass)
    }

    /// Likelihoods of `x` for an event window and for a clean window.
    pub fn likelihoods(&self, x: f64) -> (f64, f64) {
        let hi = self.level_density(x, self.high);
        let lo = self.level_density(x, self.low);
        (
            self.tpr * hi + (1.0 - self.tpr) * lo,
            self.fpr * hi + (1.0 - self.fpr) * lo,
        )
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-likelihoods of the responses under (abnormal, normal).
fn log_likelihoods(probs: &[f64], config: &SynthConfig) -> (f64, f64) {
    let channel = ResponseChannel::from(config);
    let (event, clean): (Vec<f64>, Vec<f64>) = probs.iter().map(|&x| channel.likelihoods(x)).unzip();
    let ll_normal: f64 = clean.iter().map(|v| v.ln()).sum();
    let n = probs.len();
    if n == 0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let rho = config.event_density;

    let ll_abnormal = if config.bursty {
        let len = burst_length(n, rho);
        let starts: Vec<f64> = (0..=n - len)
            .map(|s| {
                (0..n)
                    .map(|j| if j >= s && j < s + len { event[j].ln() } else { clean[j].ln() })
                    .sum()
            })
            .collect();
        log_sum_exp(&starts) - ((n - len + 1) as f64).ln()
    } else {
        // P(x | abnormal) = (prod m_j - prod c_j) / (1 - (1 - rho)^n) with
        // m_j = rho f1 + (1 - rho) f0 and c_j = (1 - rho) f0, the second term
        // removing the event-free configurations excluded by rejection.
        let log_m: f64 = event
            .iter()
            .zip(&clean)
            .map(|(f1, f0)| (rho * f1 + (1.0 - rho) * f0).ln())
            .sum();
        let log_c: f64 = clean.iter().map(|f0| ((1.0 - rho) * f0).ln()).sum();
        if log_m == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            let ratio = (log_c - log_m).exp().min(1.0);
            let none_free = -(1.0 - rho).powi(n as i32);
            log_m + (-ratio).ln_1p() - none_free.ln_1p()
        }
    };
    (ll_abnormal, ll_normal)
}

fn posterior_from(ll_abnormal: f64, ll_normal: f64, prior: f64) -> Result<f64> {
    if ll_abnormal == f64::NEG_INFINITY && ll_normal == f64::NEG_INFINITY {
        return Err(Error::Invalid(
            "responses are impossible under both classes of the synthetic model".into(),
        ));
    }
    if prior <= 0.0 {
        return Ok(0.0);
    }
    if prior >= 1.0 {
        return Ok(1.0);
    }
    let log_odds = prior.ln() - (1.0 - prior).ln() + ll_abnormal - ll_normal;
    if log_odds == f64::INFINITY {
        return Ok(1.0);
    }
    if log_odds == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + (-log_odds).exp()))
}

/// Window counts the simulator can produce for this duration distribution.
fn allowed_counts(config: &SynthConfig, windowing: &WindowingConfig) -> Vec<usize> {
    match &config.duration {
        Distribution::Choice { values } => {
            let mut counts: Vec<usize> = values
                .iter()
                .map(|&d| windowing.window_count(d))
                .filter(|&c| c > 0)
                .collect();
            counts.sort_unstable();
            counts.dedup();
            counts
        }
        other => {
            let (lo, hi) = other.support();
            let lo = windowing.window_count(lo.max(windowing.min_duration()));
            let hi = windowing.window_count(hi);
            (lo.max(1)..=hi).collect()
        }
    }
}

fn check_count(outputs: &WindowOutputs, config: &SynthConfig, windowing: &WindowingConfig) -> Result<()> {
    let allowed = allowed_counts(config, windowing);
    if allowed.binary_search(&outputs.len()).is_err() {
        return Err(Error::Invalid(format!(
            "recording `{}` has {} windows, which the synthetic config cannot produce under this windowing",
            outputs.recording_id,
            outputs.len()
        )));
    }
    Ok(())
}

/// P(abnormal | all window responses of one recording).
pub fn bayes_optimal_arbiter(outputs: &WindowOutputs, config: &SynthConfig, windowing: &WindowingConfig) -> Result<f64> {
    check_count(outputs, config, windowing)?;
    let (la, ln) = log_likelihoods(&outputs.probabilities(), config);
    posterior_from(la, ln, config.prevalence_abnormal)
}

/// P(session abnormal | responses of every recording in the session). The
/// recordings of a session share its label and are otherwise independent.
pub fn bayes_optimal_session(recordings: &[&WindowOutputs], config: &SynthConfig, windowing: &WindowingConfig) -> Result<f64> {
    let mut total_a = 0.0;
    let mut total_n = 0.0;
    for out in recordings {
        check_count(out, config, windowing)?;
        let (la, ln) = log_likelihoods(&out.probabilities(), config);
        total_a += la;
        total_n += ln;
    }
    posterior_from(total_a, total_n, config.prevalence_abnormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firststage::simulate;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn fixed_20(cfg: SynthConfig) -> SynthConfig {
        SynthConfig {
            duration: Distribution::Fixed { value: 1260.0 },
            ..cfg
        }
    }

    fn outputs(probs: &[f64]) -> WindowOutputs {
        WindowOutputs::from_probabilities("r", probs)
    }

    #[test]
    fn quiet_recording_lowers_posterior() {
        let cfg = fixed_20(SynthConfig {
            window_fpr: 0.0,
            response_noise: 0.0,
            ..SynthConfig::default()
        });
        let p = bayes_optimal_arbiter(&outputs(&[0.2; 20]), &cfg, &WindowingConfig::default()).unwrap();
        assert!(p <= cfg.prevalence_abnormal);
    }

    #[test]
    fn single_certain_event_gives_certainty() {
        let cfg = fixed_20(SynthConfig {
            window_tpr: 1.0,
            window_fpr: 0.0,
            response_noise: 0.0,
            ..SynthConfig::default()
        });
        let mut probs = vec![0.2; 20];
        probs[7] = 0.8;
        let p = bayes_optimal_arbiter(&outputs(&probs), &cfg, &WindowingConfig::default()).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn uninformative_channel_returns_prior() {
        let cfg = fixed_20(SynthConfig {
            window_tpr: 0.3,
            window_fpr: 0.3,
            prevalence_abnormal: 0.37,
            ..SynthConfig::default()
        });
        for probs in [vec![0.2; 20], vec![0.9; 20], (0..20).map(|i| 0.05 + i as f64 * 0.045).collect()] {
            let p = bayes_optimal_arbiter(&outputs(&probs), &cfg, &WindowingConfig::default()).unwrap();
            assert!((p - 0.37).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn window_count_mismatch_is_rejected() {
        let cfg = fixed_20(SynthConfig::default());
        assert!(bayes_optimal_arbiter(&outputs(&[0.2; 7]), &cfg, &WindowingConfig::default()).is_err());
    }

    #[test]
    fn noisy_density_integrates_to_one() {
        let ch = ResponseChannel::from(&SynthConfig::default());
        let n = 200_000;
        let h = 1.0 / n as f64;
        let total: f64 = (0..n).map(|i| ch.level_density((i as f64 + 0.5) * h, 0.2) * h).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn bursty_posterior_matches_brute_force() {
        let cfg = SynthConfig {
            bursty: true,
            duration: Distribution::Fixed { value: 360.0 },
            event_density: 0.4,
            ..SynthConfig::default()
        };
        let windowing = WindowingConfig::default();
        let probs = [0.25, 0.78, 0.83, 0.31, 0.2];
        let got = bayes_optimal_arbiter(&outputs(&probs), &cfg, &windowing).unwrap();

        let ch = ResponseChannel::from(&cfg);
        let len = burst_length(5, 0.4);
        let mut abnormal = 0.0;
        for s in 0..=5 - len {
            let mut l = 1.0;
            for (j, &x) in probs.iter().enumerate() {
                let (f1, f0) = ch.likelihoods(x);
                l *= if j >= s && j < s + len { f1 } else { f0 };
            }
            abnormal += l / (5 - len + 1) as f64;
        }
        let normal: f64 = probs.iter().map(|&x| ch.likelihoods(x).1).product();
        let expected = 0.5 * abnormal / (0.5 * abnormal + 0.5 * normal);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn iid_posterior_matches_enumeration() {
        // Enumerate every event pattern of a 5-window recording.
        let cfg = SynthConfig {
            duration: Distribution::Fixed { value: 360.0 },
            event_density: 0.3,
            ..SynthConfig::default()
        };
        let probs = [0.25, 0.78, 0.13, 0.31, 0.6];
        let got = bayes_optimal_arbiter(&outputs(&probs), &cfg, &WindowingConfig::default()).unwrap();
        let ch = ResponseChannel::from(&cfg);
        let mut abnormal = 0.0;
        let mut mass = 0.0;
        for mask in 1u32..32 {
            let mut prior = 1.0;
            let mut l = 1.0;
            for (j, &x) in probs.iter().enumerate() {
                let (f1, f0) = ch.likelihoods(x);
                if mask & (1 << j) != 0 {
                    prior *= 0.3;
                    l *= f1;
                } else {
                    prior *= 0.7;
                    l *= f0;
                }
            }
            mass += prior;
            abnormal += prior * l;
        }
        abnormal /= mass;
        let normal: f64 = probs.iter().map(|&x| ch.likelihoods(x).1).product();
        let expected = abnormal / (abnormal + normal);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn session_posterior_of_singleton_equals_recording() {
        let cfg = SynthConfig::default();
        let data = simulate(&SynthConfig { n_patients: 5, ..cfg.clone() }, &WindowingConfig::default()).unwrap();
        for out in data.outputs.values() {
            let a = bayes_optimal_arbiter(out, &cfg, &WindowingConfig::default()).unwrap();
            let b = bayes_optimal_session(&[out], &cfg, &WindowingConfig::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn posterior_ignores_window_order(seed in any::<u64>(), probs in proptest::collection::vec(0.01f64..0.99, 20)) {
            let cfg = fixed_20(SynthConfig::default());
            let w = WindowingConfig::default();
            let a = bayes_optimal_arbiter(&outputs(&probs), &cfg, &w).unwrap();
            let mut shuffled = probs.clone();
            shuffled.shuffle(&mut crate::rng::rng_from(seed));
            let b = bayes_optimal_arbiter(&outputs(&shuffled), &cfg, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Detection statistics and binomial confidence intervals.

use serde::{Deserialize, Serialize};

use crate::scalar::FloatScalar;

/// z-score of a two-sided 95 % interval.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval<F: FloatScalar>(successes: u64, trials: u64, z: F) -> (F, F) {
    if trials == 0 {
        return (F::zero(), F::one());
    }
    let n = F::from_count(trials);
    let p = F::from_count(successes) / n;
    let two = F::from_count(2);
    let four = F::from_count(4);
    let z2 = z * z;
    let denom = F::one() + z2 / n;
    let centre = p + z2 / (two * n);
    let half = z * (p * (F::one() - p) / n + z2 / (four * n * n)).sqrt();
    let lo = ((centre - half) / denom).max(F::zero());
    let hi = ((centre + half) / denom).min(F::one());
    (lo, hi)
}

/// Aggregated outcome of a batch of attack trials.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub trials: u64,
    /// Trials where the attack raised an authentication exception.
    pub detected: u64,
    pub exceptions: u64,
    /// Trials where leaked bytes differed from the victim's plaintext.
    pub confidentiality_preserved: u64,
    /// Trials where the defender read back something other than what the
    /// attacker intended to write.
    pub integrity_corrupted: u64,
    /// Trials in which the attack had its intended effect.
    pub undetected: u64,
    /// Trials where the allocator's own bookkeeping flagged a bad free.
    pub allocator_flagged: u64,
}

impl DetectionStats {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.detected as f64 / self.trials as f64
        }
    }

    pub fn wilson95(&self) -> (f64, f64) {
        wilson_interval(self.detected, self.trials, Z_95)
    }

    /// True if `p` lies inside the 95 % Wilson interval of the detection rate.
    pub fn consistent_with(&self, p: f64) -> bool {
        let (lo, hi) = self.wilson95();
        lo <= p && p <= hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_value() {
        // 50/100 worked by hand: centre 0.519208, half-width 0.0998646
        let (lo, hi) = wilson_interval::<f64>(50, 100, Z_95);
        assert!((lo - 0.403_831).abs() < 1e-5, "{lo}");
        assert!((hi - 0.596_169).abs() < 1e-5, "{hi}");
    }

    #[test]
    fn wilson_extremes() {
        let (lo, hi) = wilson_interval::<f64>(10_000, 10_000, Z_95);
        assert_eq!(hi, 1.0);
        assert!(lo > 0.9996 && lo < 0.99963);
        let (lo, _) = wilson_interval::<f64>(0, 10, Z_95);
        assert_eq!(lo, 0.0);
        let (lo32, hi32) = wilson_interval::<f32>(50, 100, Z_95 as f32);
        assert!(lo32 < 0.5 && hi32 > 0.5);
    }

    #[test]
    fn detected_never_exceeds_trials_in_rate() {
        let s = DetectionStats {
            trials: 4,
            detected: 3,
            ..Default::default()
        };
        assert_eq!(s.rate(), 0.75);
        assert!(s.consistent_with(0.75));
    }
}

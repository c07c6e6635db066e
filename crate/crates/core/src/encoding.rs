//! Daily + weekly sinusoidal position encoding of absolute sample indices.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

/// Scalar encoding `sin(2πt / day) + sin(2πt / week)` with `day = 24 · hr_sample`.
///
/// `t0_offset` is the number of samples between midnight and the first
/// sample of the dataset. Arguments are reduced modulo one week before the
/// sines are evaluated, so timestamps a week apart encode identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoder {
    hr_sample: u32,
    #[serde(default)]
    t0_offset: u64,
}

impl PositionalEncoder {
    pub fn new(hr_sample: u32) -> Self {
        Self::with_offset(hr_sample, 0)
    }

    /// Panics if `hr_sample` is zero.
    pub fn with_offset(hr_sample: u32, t0_offset: u64) -> Self {
        assert!(hr_sample >= 1, "hr_sample must be >= 1");
        Self {
            hr_sample,
            t0_offset,
        }
    }

    pub fn hr_sample(&self) -> u32 {
        self.hr_sample
    }

    pub fn t0_offset(&self) -> u64 {
        self.t0_offset
    }

    pub fn day_len(&self) -> u64 {
        24 * u64::from(self.hr_sample)
    }

    pub fn week_len(&self) -> u64 {
        7 * self.day_len()
    }

    pub fn encode(&self, t: u64) -> f64 {
        let week = self.week_len();
        let day = self.day_len();
        let r = (t % week + self.t0_offset % week) % week;
        let daily = (TAU * (r % day) as f64 / day as f64).sin();
        let weekly = (TAU * r as f64 / week as f64).sin();
        daily + weekly
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn fixed_points() {
        let e = PositionalEncoder::new(12);
        assert_eq!(e.encode(0), 0.0);
        let expect = PI.sin() + (PI / 7.0).sin();
        assert!((e.encode(144) - expect).abs() < 1e-12);
        assert!((e.encode(144) - 0.433884).abs() < 1e-6);
    }

    #[test]
    fn offset_shifts_phase() {
        let shifted = PositionalEncoder::with_offset(12, 100);
        let base = PositionalEncoder::new(12);
        assert_eq!(shifted.encode(44), base.encode(144));
    }

    proptest! {
        #[test]
        fn weekly_period_is_exact(t in 0u64..2016, m in 0u64..10_000) {
            let e = PositionalEncoder::new(12);
            prop_assert_eq!(e.encode(t), e.encode(t + 2016 * m));
        }

        #[test]
        fn bounded(t in any::<u32>(), hr in 1u32..60) {
            let v = PositionalEncoder::new(hr).encode(u64::from(t));
            prop_assert!((-2.0..=2.0).contains(&v));
        }

        #[test]
        fn one_day_apart_differs_by_weekly_term(t in 0u64..100_000) {
            let e = PositionalEncoder::new(12);
            let weekly = |s: u64| (TAU * (s % 2016) as f64 / 2016.0).sin();
            let d = e.encode(t + 288) - e.encode(t);
            prop_assert!((d - (weekly(t + 288) - weekly(t))).abs() < 1e-12);
        }
    }
}

//! Inverse-square-root learning-rate schedule with linear warmup:
//! `lr = base * min(step^-0.5, step * warmup^-1.5)`.

use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: u64) -> Result<Self, TensorError> {
        if !(base > 0.0) {
            return Err(TensorError::InvalidSchedule(format!(
                "base rate must be positive, got {base}"
            )));
        }
        if warmup < 1 {
            return Err(TensorError::InvalidSchedule("warmup must be >= 1".into()));
        }
        Ok(LrSchedule { base, warmup })
    }

    /// Rate at a 1-based step. Both branches meet at `step == warmup`.
    pub fn lr_at(&self, step: u64) -> Result<f64, TensorError> {
        if step == 0 {
            return Err(TensorError::ZeroStep);
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.base * s.powf(-0.5).min(s * w.powf(-1.5)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_values() {
        let sched = LrSchedule::new(2e-3, 10_000).unwrap();
        assert!((sched.lr_at(10_000).unwrap() - 2e-5).abs() < 1e-12);
        assert!((sched.lr_at(40_000).unwrap() - 1e-5).abs() < 1e-12);
        let dec = LrSchedule::new(0.2, 10_000).unwrap();
        assert!((dec.lr_at(10_000).unwrap() - 2e-3).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_warmup() {
        let sched = LrSchedule::new(1e-2, 500).unwrap();
        let at = sched.lr_at(500).unwrap();
        let before = sched.lr_at(499).unwrap();
        let after = sched.lr_at(501).unwrap();
        assert!((at - 1e-2 * 500f64.powf(-0.5)).abs() < 1e-15);
        assert!(before < at && after < at);
    }

    #[test]
    fn warmup_is_linear() {
        let sched = LrSchedule::new(1.0, 100).unwrap();
        let l10 = sched.lr_at(10).unwrap();
        let l20 = sched.lr_at(20).unwrap();
        assert!((l20 - 2.0 * l10).abs() < 1e-15);
    }

    #[test]
    fn step_zero_is_an_error() {
        let sched = LrSchedule::new(1.0, 10).unwrap();
        assert!(matches!(sched.lr_at(0), Err(TensorError::ZeroStep)));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LrSchedule::new(0.0, 10).is_err());
        assert!(LrSchedule::new(-1.0, 10).is_err());
        assert!(LrSchedule::new(1.0, 0).is_err());
    }
}

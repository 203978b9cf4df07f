//! Dense-array numeric substrate: forward operations, reverse-mode
//! gradients and the Adam optimizer behind them.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{
    affine_forward, conv1d_grams_forward, cosine_forward, kernel_pool_forward, NORM_EPS, POOL_EPS,
};
pub use params::{ParamId, ParamSlot, ParamStore};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Means and widths of the Gaussian pooling kernels.
///
/// Exactly one kernel is the exact-match kernel at mu = 1.0; it is stored
/// first, followed by the soft kernels in ascending mean order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    mus: Vec<f64>,
    deltas: Vec<f64>,
}

impl KernelConfig {
    pub fn new(mus: Vec<f64>, deltas: Vec<f64>) -> Result<Self> {
        if mus.len() != deltas.len() || mus.is_empty() {
            return Err(Error::Config(
                "kernel means and widths must be non-empty and equal length".into(),
            ));
        }
        if deltas.iter().any(|d| *d <= 0.0) {
            return Err(Error::Config("kernel widths must be positive".into()));
        }
        let exact = mus.iter().filter(|m| **m == 1.0).count();
        if exact != 1 {
            return Err(Error::Config(format!(
                "expected exactly one exact-match kernel at mu = 1.0, found {}",
                exact
            )));
        }
        Ok(KernelConfig { mus, deltas })
    }

    /// 21 kernels: the exact-match kernel (mu 1.0, delta 1e-3) plus 20
    /// soft kernels with means -0.95, -0.85, ..., 0.95 and delta 0.1.
    pub fn standard() -> Self {
        let mut mus = vec![1.0];
        let mut deltas = vec![1e-3];
        for i in 0..20 {
            mus.push(-0.95 + 0.1 * i as f64);
            deltas.push(0.1);
        }
        KernelConfig { mus, deltas }
    }

    pub fn count(&self) -> usize {
        self.mus.len()
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_has_21_kernels_one_exact() {
        let cfg = KernelConfig::standard();
        assert_eq!(cfg.count(), 21);
        assert_eq!(cfg.mus().iter().filter(|m| **m == 1.0).count(), 1);
        assert_eq!(cfg.mus()[0], 1.0);
        assert_eq!(cfg.deltas()[0], 1e-3);
        // soft kernels ascend from -0.95 to 0.95
        assert!((cfg.mus()[1] + 0.95).abs() < 1e-12);
        assert!((cfg.mus()[20] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn duplicate_exact_kernel_rejected() {
        assert!(KernelConfig::new(vec![1.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(KernelConfig::new(vec![1.0, 0.5], vec![0.1, -0.1]).is_err());
    }
}

//! Scalar reference implementations of the forward operations.
//!
//! Both the tape ops and the frozen (inference-only) paths call these, so
//! the two routes are bit-identical by construction.

use crate::error::{Error, Result};

use super::tensor::Tensor;
use super::KernelConfig;

/// Cosine rows/columns with a norm below this are zeroed by convention.
pub const NORM_EPS: f64 = 1e-12;
/// Clamp inside the kernel-pool log; the clamped branch has zero gradient.
pub const POOL_EPS: f64 = 1e-10;

/// Windowed n-gram convolution with relu, right-padded with `h - 1` zero
/// rows so the output keeps the input length.
///
/// `e` is m x dim, `filters` is (h*dim) x f, `bias` is length f; row i of
/// the output is `relu(flatten(e[i..i+h]) . filters + bias)`.
pub fn conv1d_grams_forward(e: &Tensor, filters: &Tensor, bias: &Tensor, h: usize) -> Result<Tensor> {
    if e.shape().len() != 2 || filters.shape().len() != 2 || bias.shape().len() != 1 {
        return Err(Error::Shape("conv1d_grams expects (2d, 2d, 1d) inputs".into()));
    }
    let m = e.rows();
    let dim = e.cols();
    if m == 0 || h == 0 {
        return Err(Error::Shape("conv1d_grams needs m >= 1 and h >= 1".into()));
    }
    let nf = filters.cols();
    if filters.rows() != h * dim || bias.len() != nf {
        return Err(Error::Shape(format!(
            "conv1d_grams: filters {:?} / bias {:?} do not fit h={} dim={}",
            filters.shape(),
            bias.shape(),
            h,
            dim
        )));
    }
    let mut out = Tensor::zeros(&[m, nf]);
    for i in 0..m {
        for f in 0..nf {
            let mut acc = bias.data()[f];
            for j in 0..h {
                if i + j >= m {
                    break; // zero padding rows contribute nothing
                }
                let erow = e.row(i + j);
                for c in 0..dim {
                    acc += erow[c] * filters.at2(j * dim + c, f);
                }
            }
            out.set2(i, f, if acc > 0.0 { acc } else { 0.0 });
        }
    }
    Ok(out)
}

/// Row-by-row cosine similarity matrix between `a` (m x f) and `b` (n x f).
/// Rows with near-zero norm produce 0 entries.
pub fn cosine_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cosine_matrix: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.rows();
    let n = b.rows();
    let na: Vec<f64> = (0..m).map(|i| norm(a.row(i))).collect();
    let nb: Vec<f64> = (0..n).map(|j| norm(b.row(j))).collect();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        if na[i] < NORM_EPS {
            continue;
        }
        for j in 0..n {
            if nb[j] < NORM_EPS {
                continue;
            }
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.set2(i, j, dot / (na[i] * nb[j]));
        }
    }
    Ok(out)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian kernel pooling of a translation matrix into soft-TF counts:
/// `phi_k = sum_i log(max(eps, sum_j exp(-(m_ij - mu_k)^2 / (2 delta_k^2))))`.
pub fn kernel_pool_forward(m: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    if m.shape().len() != 2 || m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape(format!(
            "kernel_pool expects a non-empty matrix, got {:?}",
            m.shape()
        )));
    }
    let k = cfg.count();
    let mut phi = vec![0.0; k];
    for ki in 0..k {
        let mu = cfg.mus()[ki];
        let two_d2 = 2.0 * cfg.deltas()[ki] * cfg.deltas()[ki];
        let mut acc = 0.0;
        for i in 0..m.rows() {
            let mut inner = 0.0;
            for j in 0..m.cols() {
                let d = m.at2(i, j) - mu;
                inner += (-d * d / two_d2).exp();
            }
            acc += inner.max(POOL_EPS).ln();
        }
        phi[ki] = acc;
    }
    Ok(Tensor::vector(phi))
}

/// `w . x + b` for a 2-d weight (out x in), 1-d input and 1-d bias.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 || w.shape().len() != 2 || b.shape().len() != 1 {
        return Err(Error::Shape("affine expects (1d, 2d, 1d) inputs".into()));
    }
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::Shape(format!(
            "affine: w {:?} incompatible with x {:?}, b {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; w.rows()];
    for (o, out_v) in out.iter_mut().enumerate() {
        let mut acc = b.data()[o];
        let wrow = w.row(o);
        for (c, x_v) in x.data().iter().enumerate() {
            acc += wrow[c] * x_v;
        }
        *out_v = acc;
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_conv_passes_nonnegative_input_through() {
        // h=1, filters = identity, bias = 0: output equals relu(input).
        let dim = 3;
        let e = Tensor::from_vec(&[2, dim], vec![0.1, 0.0, 2.0, 0.5, 1.5, 0.25]).unwrap();
        let mut filt = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            filt.set2(i, i, 1.0);
        }
        let bias = Tensor::zeros(&[dim]);
        let out = conv1d_grams_forward(&e, &filt, &bias, 1).unwrap();
        assert_eq!(out.data(), e.data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let e = Tensor::zeros(&[3, 2]);
        let filt = Tensor::from_vec(&[4, 2], vec![1.0; 8]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let out = conv1d_grams_forward(&e, &filt, &bias, 2).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cosine_of_identical_orthogonal_and_zero_rows() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let m = cosine_forward(&a, &b).unwrap();
        assert_eq!(m.at2(0, 0), 1.0); // same direction
        assert_eq!(m.at2(0, 1), 0.0); // orthogonal
        assert_eq!(m.at2(1, 0), 0.0); // zero row convention
        assert_eq!(m.at2(1, 1), 0.0);
    }

    #[test]
    fn kernel_pool_single_exact_hit_is_zero() {
        let cfg = KernelConfig::standard();
        let m = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let phi = kernel_pool_forward(&m, &cfg).unwrap();
        // exact-match kernel sits at index 0: exp(0) = 1, log 1 = 0
        assert!(phi.data()[0].abs() < 1e-15);
    }

    #[test]
    fn kernel_pool_constant_matrix_closed_form() {
        // all entries equal mu_k: phi_k = rows * ln(cols)
        let cfg = KernelConfig::standard();
        let mu = cfg.mus()[3];
        let m = Tensor::from_vec(&[2, 3], vec![mu; 6]).unwrap();
        let phi = kernel_pool_forward(&m, &cfg).unwrap();
        assert!((phi.data()[3] - 2.0 * 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn affine_identity() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let mut w = Tensor::zeros(&[2, 2]);
        w.set2(0, 0, 1.0);
        w.set2(1, 1, 1.0);
        let b = Tensor::zeros(&[2]);
        let out = affine_forward(&x, &w, &b).unwrap();
        assert_eq!(out.data(), x.data());
    }
}

use alloc::vec;
use alloc::vec::Vec;

use super::encoder::TokenSequence;
use crate::error::{Error, Result};

/// Row norms below this are treated as zero by [`gram`].
pub const GRAM_EPS: f64 = 1e-8;

/// Residual adapter weight `W` (`d × d`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterW {
    dim: usize,
    data: Vec<f64>,
}

impl AdapterW {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Self::zeros(dim);
        (0..dim).for_each(|i| w.data[i * dim + i] = 1.0);
        w
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::mismatch(dim * dim, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `t + W t` for one token.
    pub fn apply_token(&self, t: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.dim)
            .zip(t)
            .map(|(row, &ti)| ti + row.iter().zip(t).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// `T + T Wᵀ`, applied to every token including CLS.
pub fn adapter_apply(t: &TokenSequence, w: &AdapterW) -> Result<TokenSequence> {
    if t.dim() != w.dim() {
        return Err(Error::mismatch(w.dim(), t.dim()));
    }
    let data = (0..t.len()).flat_map(|i| w.apply_token(t.row(i))).collect();
    TokenSequence::new(t.dim(), data)
}

/// Unit-normalizes the rows of an `n × d` block in place and returns the norms.
pub(crate) fn normalize_rows(p: &mut [f64], d: usize) -> Result<Vec<f64>> {
    p.chunks_exact_mut(d)
        .map(|row| {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            if n < GRAM_EPS {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= n);
            Ok(n)
        })
        .collect()
}

/// `Q Qᵀ` for an already row-normalized `n × d` block.
pub(crate) fn gram_of_unit(q: &[f64], d: usize) -> Vec<f64> {
    let n = q.len() / d;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = q[i * d..(i + 1) * d].iter().zip(&q[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

/// Normalized Gram matrix of an `n × d` patch-token block.
pub fn gram(p: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || p.len() % d != 0 {
        return Err(Error::shape("patch block is not a whole number of rows"));
    }
    let mut q = p.to_vec();
    normalize_rows(&mut q, d)?;
    Ok(gram_of_unit(&q, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(dim: usize, rows: usize, f: impl Fn(usize) -> f64) -> TokenSequence {
        TokenSequence::new(dim, (0..dim * rows).map(f).collect()).unwrap()
    }

    #[test]
    fn zero_and_identity_adapters() {
        let t = seq(4, 3, |i| (i as f64 * 0.37).sin());
        assert_eq!(adapter_apply(&t, &AdapterW::zeros(4)).unwrap(), t);
        let doubled = adapter_apply(&t, &AdapterW::identity(4)).unwrap();
        doubled.as_slice().iter().zip(t.as_slice()).for_each(|(a, b)| assert_eq!(*a, 2.0 * b));
        assert!(adapter_apply(&t, &AdapterW::zeros(3)).is_err());
    }

    #[test]
    fn gram_extremes() {
        let ones = gram(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2).unwrap();
        ones.iter().for_each(|v| assert!((v - 1.0).abs() < 1e-15));
        let eye = gram(&[3.0, 0.0, 0.0, 0.5], 2).unwrap();
        assert_eq!(eye, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram(&[1.0, 0.0, 0.0, 0.0], 2), Err(Error::ZeroVector));
    }

    /// Smallest eigenvalue bound via Cholesky with a shift.
    fn psd_within(g: &[f64], n: usize, tol: f64) -> bool {
        let mut a: Vec<f64> = g.to_vec();
        (0..n).for_each(|i| a[i * n + i] += tol);
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if d <= 0.0 {
                return false;
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        true
    }

    proptest! {
        #[test]
        fn adapter_is_linear(a in proptest::collection::vec(-2.0f64..2.0, 12), b in proptest::collection::vec(-2.0f64..2.0, 12),
                             w in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let w = AdapterW::from_vec(2, w).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = adapter_apply(&TokenSequence::new(2, sum).unwrap(), &w).unwrap();
            let ra = adapter_apply(&TokenSequence::new(2, a).unwrap(), &w).unwrap();
            let rb = adapter_apply(&TokenSequence::new(2, b).unwrap(), &w).unwrap();
            for ((l, x), y) in lhs.as_slice().iter().zip(ra.as_slice()).zip(rb.as_slice()) {
                prop_assert!((l - (x + y)).abs() < 1e-12);
            }
        }

        #[test]
        fn gram_is_symmetric_unit_psd(p in proptest::collection::vec(0.1f64..1.0, 8 * 5)) {
            let signed: Vec<f64> = p.iter().enumerate().map(|(i, v)| if i % 3 == 0 { -v } else { *v }).collect();
            let g = gram(&signed, 5).unwrap();
            for i in 0..8 {
                prop_assert!((g[i * 8 + i] - 1.0).abs() < 1e-12);
                for j in 0..8 {
                    prop_assert_eq!(g[i * 8 + j], g[j * 8 + i]);
                }
            }
            prop_assert!(psd_within(&g, 8, 1e-8));
        }
    }
}

//! Small dense Hermitian positive-definite routines.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sysmodel::CMatrix;

/// Lower-triangular Cholesky factor `L` with `A = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    /// Factors a Hermitian positive-definite matrix. Only the lower triangle
    /// of `a` is read.
    pub fn new(a: &CMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("square matrix", format!("{}x{}", n, a.ncols())));
        }
        let mut l = CMatrix::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]].re;
            for k in 0..j {
                d -= l[[j, k]].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[[j, j]] = Complex64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]].conj();
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &CMatrix {
        &self.l
    }

    /// `ln det A = 2 sum ln L_jj`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.re.ln()).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.l.nrows();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        // L y = b
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[[i, k]] * y[k];
            }
            y[i] = s / self.l[[i, i]].re;
        }
        // L^H x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[[k, i]].conj() * y[k];
            }
            y[i] = s / self.l[[i, i]].re;
        }
        y
    }

    /// `A^{-1}`, symmetrized so the result is exactly Hermitian.
    pub fn inverse(&self) -> CMatrix {
        let n = self.l.nrows();
        let mut inv = CMatrix::zeros((n, n));
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            e.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            e[j] = Complex64::new(1.0, 0.0);
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                inv[[i, j]] = v;
            }
        }
        hermitize(&mut inv);
        inv
    }
}

/// Replaces `a` by `(a + a^H) / 2`.
pub fn hermitize(a: &mut CMatrix) {
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] = Complex64::new(a[[i, i]].re, 0.0);
        for j in i + 1..n {
            let avg = (a[[i, j]] + a[[j, i]].conj()) * 0.5;
            a[[i, j]] = avg;
            a[[j, i]] = avg.conj();
        }
    }
}

/// `x^H A x` for Hermitian `A` (real by construction).
pub fn quad_form(a: &CMatrix, x: &[Complex64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..n {
            row += a[[i, j]] * x[j];
        }
        acc += (x[i].conj() * row).re;
    }
    acc
}

pub fn trace(a: &CMatrix) -> f64 {
    a.diag().iter().map(|z| z.re).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_normal, substream};
    use ndarray::Array2;

    fn random_hpd(n: usize, seed: u64) -> CMatrix {
        let mut rng = substream(seed, &[]);
        let g = Array2::from_shape_fn((n, n), |_| complex_normal(&mut rng, 1.0));
        let mut a = g.dot(&g.t().mapv(|z| z.conj()));
        for i in 0..n {
            a[[i, i]] += 0.5;
        }
        a
    }

    #[test]
    fn reconstructs_and_inverts() {
        for n in [1, 2, 4, 7] {
            let a = random_hpd(n, n as u64);
            let ch = Cholesky::new(&a).unwrap();
            let l = ch.factor();
            let rec = l.dot(&l.t().mapv(|z| z.conj()));
            let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (x, y) in rec.iter().zip(a.iter()) {
                assert!((x - y).norm() <= 1e-12 * scale);
            }
            let prod = ch.inverse().dot(&a);
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[[i, j]] - want).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let mut a = CMatrix::zeros((3, 3));
        a[[0, 0]] = Complex64::new(2.0, 0.0);
        a[[1, 1]] = Complex64::new(3.0, 0.0);
        a[[2, 2]] = Complex64::new(5.0, 0.0);
        let ld = Cholesky::new(&a).unwrap().log_det();
        assert!((ld - 30f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = CMatrix::zeros((2, 2));
        a[[0, 0]] = Complex64::new(1.0, 0.0);
        a[[1, 0]] = Complex64::new(2.0, 0.0);
        a[[0, 1]] = Complex64::new(2.0, 0.0);
        a[[1, 1]] = Complex64::new(1.0, 0.0);
        assert!(matches!(
            Cholesky::new(&a),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }
}

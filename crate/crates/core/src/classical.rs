//! Perfect-CSI benchmarks: the optimal likelihood-ratio test and an energy detector.

use crate::error::{Error, Result};
use crate::linalg::{quad_form, Cholesky};
use crate::sysmodel::{ChannelRealization, CMatrix};

/// Precomputed inverses and log-determinants of both hypothesis covariances.
#[derive(Debug, Clone)]
pub struct LrtContext {
    pub inv0: CMatrix,
    pub inv1: CMatrix,
    /// `ln det Sigma_0 - ln det Sigma_1`.
    pub log_det_ratio: f64,
    /// `Sigma_0^{-1} - Sigma_1^{-1}`.
    inv_diff: CMatrix,
}

pub fn lrt_context(chan: &ChannelRealization) -> Result<LrtContext> {
    let c0 = Cholesky::new(&chan.sigma_0)?;
    let c1 = Cholesky::new(&chan.sigma_1)?;
    let log_det_ratio = c0.log_det() - c1.log_det();
    if !log_det_ratio.is_finite() {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: log_det_ratio,
        });
    }
    let inv0 = c0.inverse();
    let inv1 = c1.inverse();
    let inv_diff = &inv0 - &inv1;
    Ok(LrtContext {
        inv0,
        inv1,
        log_det_ratio,
        inv_diff,
    })
}

impl LrtContext {
    pub fn m(&self) -> usize {
        self.inv0.nrows()
    }
}

/// Log-likelihood ratio `ln p(X | H1) / p(X | H0)` summed over the columns of `x`.
pub fn lrt_statistic(x: &CMatrix, ctx: &LrtContext) -> Result<f64> {
    if x.nrows() != ctx.m() {
        return Err(Error::dim(format!("{} rows", ctx.m()), x.nrows()));
    }
    let mut col = vec![Default::default(); x.nrows()];
    let mut total = 0.0;
    for c in x.columns() {
        col.iter_mut().zip(c.iter()).for_each(|(d, s)| *d = *s);
        total += ctx.log_det_ratio + quad_form(&ctx.inv_diff, &col);
    }
    Ok(total)
}

/// Zero-threshold decision on the log ratio; a tie decides 0.
pub fn lrt_decide(l: f64) -> u8 {
    (l > 0.0) as u8
}

/// Gaussian-approximation energy detector with known covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct EdContext {
    pub threshold: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub var0: f64,
    pub var1: f64,
    /// Whether H1 lies above the threshold. False only for the rare channel
    /// draws where the backscatter path lowers the received energy.
    pub h1_above: bool,
}

/// Moments of the mean-energy statistic `(1/N) sum |x_n|^2` under both
/// hypotheses and the crossing point of their Gaussian approximations.
pub fn ed_context(chan: &ChannelRealization, n: usize) -> Result<EdContext> {
    if n == 0 {
        return Err(Error::InvalidParams("energy detector needs N >= 1".into()));
    }
    let moments = |s: &CMatrix| {
        let mu: f64 = s.diag().iter().map(|z| z.re).sum();
        // tr(S^2) = ||S||_F^2 = sum of squared eigenvalues for Hermitian S
        let var = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        (mu, var)
    };
    let (mu0, var0) = moments(&chan.sigma_0);
    let (mu1, var1) = moments(&chan.sigma_1);
    Ok(EdContext {
        threshold: gaussian_crossing(mu0, var0, mu1, var1),
        mu0,
        mu1,
        var0,
        var1,
        h1_above: mu1 >= mu0,
    })
}

/// Point between `mu0` and `mu1` where the two normal densities are equal;
/// the midpoint when no crossing falls inside the interval.
fn gaussian_crossing(mu0: f64, var0: f64, mu1: f64, var1: f64) -> f64 {
    if mu0 == mu1 {
        return mu0;
    }
    let (lo, hi) = (mu0.min(mu1), mu0.max(mu1));
    let inside = |t: f64| t.is_finite() && t >= lo && t <= hi;
    let a = 1.0 / var0 - 1.0 / var1;
    let b = 2.0 * (mu1 / var1 - mu0 / var0);
    let c = mu0 * mu0 / var0 - mu1 * mu1 / var1 + (var0 / var1).ln();
    let scale = 1.0 / var0.max(var1);
    if a.abs() <= 1e-12 * scale {
        let t = -c / b;
        return if inside(t) { t } else { 0.5 * (mu0 + mu1) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        // numerically stable pair of roots
        let q = -0.5 * (b + b.signum() * sq);
        let roots = [q / a, c / q];
        if let Some(&t) = roots.iter().find(|&&t| inside(t)) {
            return t;
        }
    }
    0.5 * (mu0 + mu1)
}

pub fn ed_statistic(x: &CMatrix) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.ncols().max(1) as f64
}

pub fn ed_decide(x: &CMatrix, ctx: &EdContext) -> u8 {
    let t = ed_statistic(x);
    let above = t > ctx.threshold;
    if ctx.h1_above {
        above as u8
    } else {
        (t < ctx.threshold) as u8
    }
}

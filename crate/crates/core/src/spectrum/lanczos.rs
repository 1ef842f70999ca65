use num_traits::Float;

use super::SymmetricOperator;
use crate::error::{Result, WinqError};

/// Relative breakdown threshold: Lanczos stops once `β < BREAKDOWN_TOL ·
/// max(1, ‖T‖)`, with ‖T‖ estimated from the coefficients seen so far.
pub const BREAKDOWN_TOL: f64 = 1e-10;

/// Symmetric tridiagonal matrix produced by Lanczos.
#[derive(Clone, Debug, PartialEq)]
pub struct Tridiagonal<F> {
    pub diag: Vec<F>,
    /// Off-diagonal, one shorter than `diag`.
    pub off: Vec<F>,
    /// True when the recurrence stopped early on a vanishing `β`.
    pub breakdown: bool,
}

impl<F: Float> Tridiagonal<F> {
    /// Effective rank (number of Lanczos steps kept).
    pub fn rank(&self) -> usize {
        self.diag.len()
    }

    /// Eigenvalues in ascending order and the squared first component of
    /// each normalized eigenvector.
    pub fn ritz(&self) -> Result<(Vec<F>, Vec<F>)> {
        let (values, first) = tql2_first_row(&self.diag, &self.off)?;
        Ok((values, first.into_iter().map(|x| x * x).collect()))
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Lanczos with full reorthogonalization (two Gram–Schmidt passes per step).
/// `probe` is normalized internally; a zero probe is rejected.
pub fn lanczos_tridiagonalize<F, O>(op: &O, probe: &[F], k: usize) -> Result<Tridiagonal<F>>
where
    F: Float,
    O: SymmetricOperator<F> + ?Sized,
{
    let d = op.dim();
    if probe.len() != d {
        return Err(WinqError::Argument(format!("probe of length {} for operator of dimension {d}", probe.len())));
    }
    if k == 0 {
        return Err(WinqError::Argument("Lanczos needs at least one step".into()));
    }
    let pn = dot(probe, probe).sqrt();
    if !(pn > F::zero()) || !pn.is_finite() {
        return Err(WinqError::Argument("Lanczos probe must be a non-zero finite vector".into()));
    }
    let k = k.min(d);
    let tol = F::from(BREAKDOWN_TOL).expect("float constant");
    let mut basis: Vec<Vec<F>> = vec![probe.iter().map(|&x| x / pn).collect()];
    let mut diag = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k);
    let mut scale = F::zero();
    let mut breakdown = false;
    for i in 0..k {
        let q = &basis[i];
        let mut z = op.apply(q)?;
        let a = dot(q, &z);
        for (zj, &qj) in z.iter_mut().zip(q) {
            *zj = *zj - a * qj;
        }
        if i > 0 {
            let b = off[i - 1];
            for (zj, &pj) in z.iter_mut().zip(&basis[i - 1]) {
                *zj = *zj - b * pj;
            }
        }
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &z);
                for (zj, &vj) in z.iter_mut().zip(v) {
                    *zj = *zj - c * vj;
                }
            }
        }
        diag.push(a);
        if i + 1 == k {
            break;
        }
        let b = dot(&z, &z).sqrt();
        scale = scale.max(a.abs() + b + off.last().map_or(F::zero(), |x: &F| x.abs()));
        if b < tol * scale.max(F::one()) {
            breakdown = true;
            break;
        }
        off.push(b);
        basis.push(z.into_iter().map(|x| x / b).collect());
    }
    Ok(Tridiagonal { diag, off, breakdown })
}

/// Implicit QL eigensolver for a symmetric tridiagonal matrix (the EISPACK
/// `tql2` iteration), tracking only the first row of the eigenvector matrix.
/// Returns eigenvalues ascending with matching first components.
pub fn tql2_first_row<F: Float>(diag: &[F], off: &[F]) -> Result<(Vec<F>, Vec<F>)> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(WinqError::Argument(format!(
            "tridiagonal with {} diagonal and {} off-diagonal entries",
            n,
            off.len()
        )));
    }
    let mut d = diag.to_vec();
    let mut e: Vec<F> = off.iter().copied().chain(std::iter::once(F::zero())).collect();
    let mut z = vec![F::zero(); n];
    z[0] = F::one();
    let two = F::one() + F::one();
    let eps = F::epsilon();
    let mut f = F::zero();
    let mut tst1 = F::zero();
    let max_iter = 30 * n.max(1);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(WinqError::Argument("tridiagonal eigensolver did not converge".into()));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(F::one());
                if p < F::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di = *di - h;
                }
                f = f + h;

                p = d[m];
                let mut c = F::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = F::zero();
                let mut s2 = F::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let zh = z[i + 1];
                    z[i + 1] = s * z[i] + c * zh;
                    z[i] = c * z[i] - s * zh;
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] = d[l] + f;
        e[l] = F::zero();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(std::cmp::Ordering::Equal));
    Ok((order.iter().map(|&i| d[i]).collect(), order.iter().map(|&i| z[i]).collect()))
}

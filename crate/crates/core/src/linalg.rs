//! Small dense helpers shared by every module.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn cident(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn frob(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn cvec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn inverse(m: &CMat) -> Option<CMat> {
    m.clone().try_inverse()
}

/// Matrix exponential via scaling and squaring with a Taylor core.
pub fn expm(m: &CMat) -> CMat {
    let n = m.nrows();
    let norm = frob(m);
    let mut s = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        s += 1;
    }
    let a = m * C64::new(scale, 0.0);
    let mut term = cident(n);
    let mut sum = cident(n);
    for k in 1..=18 {
        term = &term * &a * C64::new(1.0 / k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-major vectorisation, matching `kron` conventions:
/// `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.
pub fn vectorize(m: &CMat) -> CVec {
    CVec::from_iterator(m.len(), m.iter().cloned())
}

pub fn unvectorize(v: &CVec, n: usize) -> CMat {
    CMat::from_iterator(n, n, v.iter().cloned())
}

pub fn random_cmat<R: Rng>(rng: &mut R, n: usize, scale: f64) -> CMat {
    CMat::from_fn(n, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * scale
    })
}

pub fn random_skew_hermitian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> CMat {
    let m = random_cmat(rng, n, scale);
    (&m - m.adjoint()) * C64::new(0.5, 0.0)
}

pub fn random_hermitian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> CMat {
    let m = random_cmat(rng, n, scale);
    (&m + m.adjoint()) * C64::new(0.5, 0.0)
}

pub fn to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(|r| C64::new(r, 0.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `g(a, b)` for a symmetric matrix `g`.
pub fn g_dot(g: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += g[(i, j)] * a[i] * b[j];
        }
    }
    s
}

/// Gram–Schmidt in the inner product `g`, keeping vectors in input order
/// and dropping those that are numerically dependent.
pub fn gram_schmidt(g: &DMatrix<f64>, vecs: &[Vec<f64>], max: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vecs {
        if out.len() == max {
            break;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for e in &out {
                let c = g_dot(g, &w, e);
                for (wi, ei) in w.iter_mut().zip(e) {
                    *wi -= c * ei;
                }
            }
        }
        let len = g_dot(g, &w, &w).max(0.0).sqrt();
        if len > 1e-8 {
            w.iter_mut().for_each(|x| *x /= len);
            out.push(w);
        }
    }
    out
}

/// Smallest eigenvalue of a real symmetric matrix.
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let e = m.clone().symmetric_eigen();
    e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let n = m.nrows();
    // Real symmetric embedding [[Re, -Im], [Im, Re]] doubles every eigenvalue.
    let mut big = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            big[(i, j)] = z.re;
            big[(i + n, j + n)] = z.re;
            big[(i, j + n)] = -z.im;
            big[(i + n, j)] = z.im;
        }
    }
    let mut ev: Vec<f64> = big.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev.into_iter().step_by(2).collect()
}

/// Orthonormal basis of the null space of a complex matrix (`rows × cols`),
/// returned as the columns of a `cols × k` matrix.
pub fn null_space(m: &CMat, tol: f64) -> CMat {
    let cols = m.ncols();
    let gram = m.adjoint() * m;
    let n = cols;
    let mut big = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = gram[(i, j)];
            big[(i, j)] = z.re;
            big[(i + n, j + n)] = z.re;
            big[(i, j + n)] = -z.im;
            big[(i + n, j)] = z.im;
        }
    }
    let eig = big.symmetric_eigen();
    let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1.0);
    let mut basis: Vec<CVec> = Vec::new();
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    for &k in &order {
        if eig.eigenvalues[k] > tol * scale {
            break;
        }
        let col = eig.eigenvectors.column(k);
        let mut v = CVec::from_fn(n, |i, _| C64::new(col[i], col[i + n]));
        for b in &basis {
            let c = b.dotc(&v);
            v -= b * c;
        }
        let len = cvec_norm(&v);
        if len > 1e-6 {
            basis.push(v / C64::new(len, 0.0));
        }
    }
    let mut out = CMat::zeros(n, basis.len());
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    out
}

pub fn to_dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}


/// Composite trapezoid weights on arbitrary nodes.
pub fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let m = t.len();
    let mut w = vec![0.0; m];
    for i in 0..m.saturating_sub(1) {
        let h = t[i + 1] - t[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Composite Simpson weights on non-uniform nodes; an odd trailing interval
/// is closed with the quadratic through the last three nodes.
pub fn simpson_weights(t: &[f64]) -> Vec<f64> {
    let m = t.len();
    if m < 3 {
        return trapezoid_weights(t);
    }
    let mut w = vec![0.0; m];
    let intervals = m - 1;
    let paired = intervals - intervals % 2;
    let mut i = 0;
    while i < paired {
        let h0 = t[i + 1] - t[i];
        let h1 = t[i + 2] - t[i + 1];
        let s = (h0 + h1) / 6.0;
        w[i] += s * (2.0 - h1 / h0);
        w[i + 1] += s * (h0 + h1) * (h0 + h1) / (h0 * h1);
        w[i + 2] += s * (2.0 - h0 / h1);
        i += 2;
    }
    if intervals % 2 == 1 {
        let a = t[m - 2] - t[m - 3];
        let b = t[m - 1] - t[m - 2];
        w[m - 3] += -b * b * b / (6.0 * a * (a + b));
        w[m - 2] += b * (b + 3.0 * a) / (6.0 * a);
        w[m - 1] += b * (2.0 * b + 3.0 * a) / (6.0 * (a + b));
    }
    w
}

//! Scatter matrices, the regularized generalized eigenproblem and the
//! Fisher criterion, for both plain and quantized spectra.
//!
//! The quantized total scatter is `sym(Xq H Xqᵀ + λ X H Xqᵀ)` and the
//! within scatter the class-wise sum of the same expression, where
//! `sym(A) = (A + Aᵀ)/2`. Directions are the leading eigenvectors of the
//! pencil `(S_T, S_W + εI)`.

use std::fs;
use std::path::Path;

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, MatRef, Par, Side};

use crate::dct::SpectrumSet;
use crate::error::{QfdaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScatterKind {
    Plain,
    Quantized,
}

#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub s_t: Mat<f64>,
    pub s_w: Mat<f64>,
    pub lambda: f64,
    pub kind: ScatterKind,
    /// Columns spanning a space that contains the ranges of both matrices.
    /// Lets the eigensolve work on that span instead of all of `d'`.
    pub support: Option<Mat<f64>>,
}

impl ScatterPair {
    pub fn dim(&self) -> usize {
        self.s_t.nrows()
    }
}

/// Each column minus the mean of its class (`class = None`: of all columns).
fn centered(x: MatRef<'_, f64>, labels: &[usize], by_class: bool) -> Mat<f64> {
    let (d, n) = (x.nrows(), x.ncols());
    let groups = if by_class { crate::data::num_classes(labels) } else { 1 };
    let group = |j: usize| if by_class { labels[j] } else { 0 };
    let mut sums = Mat::<f64>::zeros(d, groups);
    let mut counts = vec![0usize; groups];
    for j in 0..n {
        let g = group(j);
        counts[g] += 1;
        for i in 0..d {
            sums[(i, g)] += x[(i, j)];
        }
    }
    Mat::from_fn(d, n, |i, j| {
        let g = group(j);
        x[(i, j)] - sums[(i, g)] / counts[g] as f64
    })
}

fn symmetrize(a: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn check_classes(set: &SpectrumSet) -> Result<()> {
    let mut counts = vec![0usize; set.num_classes()];
    for &l in &set.labels {
        counts[l] += 1;
    }
    match counts.iter().position(|&c| c == 0) {
        Some(k) => Err(QfdaError::Data(format!("class {k} has no members"))),
        None if set.is_empty() => Err(QfdaError::Data("no samples".into())),
        None => Ok(()),
    }
}

/// `S_T = X H Xᵀ`, `S_W = Σ_j X_j H_j X_jᵀ`.
pub fn plain_scatters(train: &SpectrumSet) -> Result<ScatterPair> {
    check_classes(train)?;
    let x = train.coeffs.as_ref();
    let c = centered(x, &train.labels, false);
    let cw = centered(x, &train.labels, true);
    Ok(ScatterPair {
        s_t: symmetrize(&(&c * c.transpose())),
        s_w: symmetrize(&(&cw * cw.transpose())),
        lambda: 0.0,
        kind: ScatterKind::Plain,
        support: Some(train.coeffs.clone()),
    })
}

/// `sym(Cq Cqᵀ + λ C Cqᵀ)` for centered originals `C` and quantized `Cq`.
fn mixed_scatter(c: &Mat<f64>, cq: &Mat<f64>, lambda: f64) -> Mat<f64> {
    let qq = cq * cq.transpose();
    let cross = c * cq.transpose();
    let d = qq.nrows();
    Mat::from_fn(d, d, |i, j| {
        0.5 * (qq[(i, j)] + qq[(j, i)]) + 0.5 * lambda * (cross[(i, j)] + cross[(j, i)])
    })
}

pub fn quantized_scatters(train: &SpectrumSet, quantized: &SpectrumSet, lambda: f64) -> Result<ScatterPair> {
    if train.labels != quantized.labels || train.d_prime() != quantized.d_prime() {
        return Err(QfdaError::Consistency(
            "original and quantized spectra differ in labels or shape".into(),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(QfdaError::Value(format!("lambda must be nonnegative, got {lambda}")));
    }
    check_classes(train)?;
    let (x, xq) = (train.coeffs.as_ref(), quantized.coeffs.as_ref());
    let labels = &train.labels;
    let s_t = mixed_scatter(&centered(x, labels, false), &centered(xq, labels, false), lambda);
    let s_w = mixed_scatter(&centered(x, labels, true), &centered(xq, labels, true), lambda);
    let (d, n) = (x.nrows(), x.ncols());
    let support = Mat::from_fn(d, 2 * n, |i, j| if j < n { x[(i, j)] } else { xq[(i, j - n)] });
    Ok(ScatterPair {
        s_t,
        s_w,
        lambda,
        kind: ScatterKind::Quantized,
        support: Some(support),
    })
}

/// How the pencil was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveRoute {
    /// `S_W + εI` positive definite: Cholesky reduction to a symmetric problem.
    Cholesky,
    /// `S_W + εI` indefinite: reduction through its eigenbasis to a standard
    /// nonsymmetric problem, keeping real eigenpairs with
    /// `uᵀ(S_W + εI)u > 0`.
    Pencil,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    /// `d' x p`, one direction per column.
    pub u: Mat<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub epsilon: f64,
    pub route: SolveRoute,
}

impl Subspace {
    pub fn p(&self) -> usize {
        self.u.ncols()
    }

    pub fn d_prime(&self) -> usize {
        self.u.nrows()
    }
}

/// Orthonormal basis of the column space of `support`, or `None` when it is
/// (numerically) all of `R^d`.
fn span_basis(support: &Mat<f64>) -> Result<Option<Mat<f64>>> {
    let d = support.nrows();
    if support.ncols() == 0 {
        return Ok(None);
    }
    let svd = support
        .thin_svd()
        .map_err(|e| QfdaError::Numeric(format!("SVD of the data span failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let smax = if s.nrows() > 0 { s[0] } else { 0.0 };
    let tol = smax * d.max(support.ncols()) as f64 * f64::EPSILON;
    let r = (0..s.nrows()).filter(|&i| s[i] > tol).count();
    if r >= d || r == 0 {
        return Ok(None);
    }
    Ok(Some(svd.U().subcols(0, r).to_owned()))
}

/// Up to `count` orthonormal vectors orthogonal to the orthonormal columns
/// of `q`, from Gram-Schmidt on the standard basis.
fn complement_basis(q: &Mat<f64>, count: usize) -> Mat<f64> {
    let d = q.nrows();
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(count);
    for e in 0..d {
        if found.len() == count {
            break;
        }
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        // twice is enough for orthogonality to working precision
        for _ in 0..2 {
            for j in 0..q.ncols() {
                let dot = (0..d).map(|i| q[(i, j)] * v[i]).sum::<f64>();
                for i in 0..d {
                    v[i] -= dot * q[(i, j)];
                }
            }
            for w in &found {
                let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    v[i] -= dot * w[i];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            found.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Mat::from_fn(d, found.len(), |i, j| found[j][i])
}

struct Pairs {
    values: Vec<f64>,
    vectors: Mat<f64>,
    route: SolveRoute,
}

fn leading_cholesky(a: &Mat<f64>, b: &Mat<f64>, p: usize) -> Option<Pairs> {
    let llt = b.llt(Side::Lower).ok()?;
    let l = llt.L();
    // M = L⁻¹ A L⁻ᵀ
    let mut y = a.clone();
    solve_lower_triangular_in_place(l, y.as_mut(), Par::Seq);
    let mut m = y.transpose().to_owned();
    solve_lower_triangular_in_place(l, m.as_mut(), Par::Seq);
    let m = symmetrize(&m);
    let evd = m.self_adjoint_eigen(Side::Lower).ok()?;
    let n = m.nrows();
    let p = p.min(n);
    let s = evd.S().column_vector();
    let values: Vec<f64> = (0..p).map(|i| s[n - 1 - i]).collect();
    let mut vectors = Mat::from_fn(n, p, |r, i| evd.U()[(r, n - 1 - i)]);
    solve_upper_triangular_in_place(l.transpose(), vectors.as_mut(), Par::Seq);
    Some(Pairs {
        values,
        vectors,
        route: SolveRoute::Cholesky,
    })
}

/// Indefinite `B = V D Vᵀ`: with `W = V |D|^(-1/2)` and `J = sign(D)` the
/// pencil is similar to the standard problem `J Wᵀ A W`, whose eigenvectors
/// `y` give `u = W y` and curvature `uᵀ B u = yᵀ J y`.
///
/// Only real pairs with `yᵀ J y > 0` are kept: they are the maxima of the
/// Rayleigh quotient `uᵀAu / uᵀBu`, while complex pairs (`uᴴBu = 0`) and
/// negative-curvature pairs cannot keep the criterion denominator positive.
fn leading_pencil(a: &Mat<f64>, b: &Mat<f64>, p: usize) -> Result<Pairs> {
    let n = a.nrows();
    let evd = b
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| QfdaError::Numeric(format!("eigendecomposition of S_W + εI failed: {e:?}")))?;
    let d = evd.S().column_vector();
    if (0..n).any(|j| d[j] == 0.0) {
        return Err(QfdaError::Numeric("S_W + εI is singular".into()));
    }
    let j_sign: Vec<f64> = (0..n).map(|j| d[j].signum()).collect();
    let w = Mat::from_fn(n, n, |i, j| evd.U()[(i, j)] / d[j].abs().sqrt());
    let at = symmetrize(&(w.transpose() * a * &w));
    let m = Mat::from_fn(n, n, |i, j| j_sign[i] * at[(i, j)]);
    let eig = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| m.eigen()))
        .map_err(|_| QfdaError::Numeric("dense eigensolver panicked".into()))?
        .map_err(|e| QfdaError::Numeric(format!("dense eigensolver failed: {e:?}")))?;
    let (values_c, vectors_c) = (eig.S().column_vector(), eig.U());

    // real Schur reports real eigenvalues with an exactly zero imaginary part
    let mut candidates: Vec<(f64, usize)> = (0..n)
        .filter(|&i| values_c[i].im == 0.0 && values_c[i].re.is_finite())
        .map(|i| (values_c[i].re, i))
        .collect();
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let jdot = |x: &[f64], y: &[f64]| -> f64 { (0..n).map(|i| j_sign[i] * x[i] * y[i]).sum() };
    // eigenvectors inside a cluster of equal eigenvalues are not
    // J-orthogonal by construction; orthogonalize against accepted members
    // and drop candidates with nothing independent left
    let top = candidates.iter().map(|c| c.0.abs()).fold(0.0, f64::max).max(1.0);
    let cluster_tol = 1e-9 * top;
    let mut accepted: Vec<(f64, Vec<f64>)> = Vec::with_capacity(p);
    for &(value, i) in &candidates {
        if accepted.len() == p {
            break;
        }
        let mut y: Vec<f64> = (0..n).map(|r| vectors_c[(r, i)].re).collect();
        let start = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (w_value, w_vec) in &accepted {
            if (w_value - value).abs() <= cluster_tol {
                let coef = jdot(w_vec, &y);
                for r in 0..n {
                    y[r] -= coef * w_vec[r];
                }
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-6 * start) {
            continue;
        }
        let curvature = jdot(&y, &y);
        if curvature > 1e-12 * norm * norm {
            let scale = 1.0 / curvature.sqrt();
            accepted.push((value, y.into_iter().map(|v| v * scale).collect()));
        }
    }
    let y = Mat::from_fn(n, accepted.len(), |r, c| accepted[c].1[r]);
    Ok(Pairs {
        values: accepted.iter().map(|a| a.0).collect(),
        vectors: &w * &y,
        route: SolveRoute::Pencil,
    })
}

fn solve_dense(a: &Mat<f64>, b: &Mat<f64>, p: usize) -> Result<Pairs> {
    match leading_cholesky(a, b, p) {
        Some(pairs) => Ok(pairs),
        None => leading_pencil(a, b, p),
    }
}

fn check_finite(m: &Mat<f64>, what: &str) -> Result<()> {
    for j in 0..m.ncols() {
        if m.col(j).iter().any(|v| !v.is_finite()) {
            return Err(QfdaError::Numeric(format!("{what} has non-finite entries")));
        }
    }
    Ok(())
}

/// Leading `p` generalized eigenpairs of `(S_T, S_W + εI)`.
///
/// Columns are scaled to `uᵀ(S_W + εI)u = 1` and signed so their largest
/// magnitude entry is positive. When `S_W + εI` is indefinite only real
/// eigenpairs with positive curvature under it are eligible.
pub fn solve_subspace(pair: &ScatterPair, p: usize, epsilon: f64) -> Result<Subspace> {
    let d = pair.dim();
    if p == 0 || p > d {
        return Err(QfdaError::Dimension(format!("p = {p} must be in 1..={d}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(QfdaError::Value(format!("epsilon must be positive, got {epsilon}")));
    }
    check_finite(&pair.s_t, "S_T")?;
    check_finite(&pair.s_w, "S_W")?;

    let regularized = |s_w: &Mat<f64>| {
        let mut b = s_w.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += epsilon;
        }
        b
    };

    let basis = match &pair.support {
        Some(support) => span_basis(support)?,
        None => None,
    };
    // outside the data span S_T = 0 and S_W + εI = εI, so every direction
    // there is an eigenvector with eigenvalue 0 and positive curvature
    let pairs = match &basis {
        Some(q) => {
            let a = symmetrize(&(q.transpose() * &pair.s_t * q));
            let b = regularized(&symmetrize(&(q.transpose() * &pair.s_w * q)));
            let reduced = solve_dense(&a, &b, p)?;
            let lifted = q * &reduced.vectors;
            let nonneg = reduced.values.iter().take_while(|&&v| v >= 0.0).count();
            let mut order: Vec<(f64, usize)> = (0..nonneg).map(|i| (reduced.values[i], i)).collect();
            // unit vectors there have curvature ε
            let mut extra = complement_basis(q, p.saturating_sub(nonneg));
            let scale = 1.0 / epsilon.sqrt();
            for j in 0..extra.ncols() {
                for i in 0..d {
                    extra[(i, j)] *= scale;
                }
            }
            order.extend((0..extra.ncols()).map(|i| (0.0, reduced.values.len() + i)));
            order.extend((nonneg..reduced.values.len()).map(|i| (reduced.values[i], i)));
            order.truncate(p);
            let pick = |c: usize| {
                if c < reduced.values.len() {
                    lifted.col(c)
                } else {
                    extra.col(c - reduced.values.len())
                }
            };
            Pairs {
                values: order.iter().map(|o| o.0).collect(),
                vectors: Mat::from_fn(d, order.len(), |i, j| pick(order[j].1)[i]),
                route: reduced.route,
            }
        }
        None => solve_dense(&pair.s_t, &regularized(&pair.s_w), p)?,
    };
    if pairs.values.len() < p {
        return Err(QfdaError::Numeric(format!(
            "only {} real generalized eigenpairs with positive curvature, need {p}",
            pairs.values.len()
        )));
    }

    // pairs arrive with uᵀ(S_W + εI)u = 1; only the sign is left to fix
    let mut u = pairs.vectors;
    for j in 0..p {
        let mut peak = 0usize;
        for i in 0..d {
            if u[(i, j)].abs() > u[(peak, j)].abs() {
                peak = i;
            }
        }
        if u[(peak, j)] < 0.0 {
            for i in 0..d {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
    check_finite(&u, "subspace")?;
    Ok(Subspace {
        u,
        eigenvalues: pairs.values,
        epsilon,
        route: pairs.route,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `q x n`.
    pub coords: Mat<f64>,
    pub labels: Vec<usize>,
}

/// `U_qᵀ X` using the first `q` directions.
pub fn project(subspace: &Subspace, data: &SpectrumSet, q: usize) -> Result<Projection> {
    if q == 0 || q > subspace.p() {
        return Err(QfdaError::Dimension(format!("q = {q} must be in 1..={}", subspace.p())));
    }
    if data.d_prime() != subspace.d_prime() {
        return Err(QfdaError::Dimension(format!(
            "data has d' = {}, subspace {}",
            data.d_prime(),
            subspace.d_prime()
        )));
    }
    Ok(Projection {
        coords: subspace.u.subcols(0, q).transpose() * &data.coeffs,
        labels: data.labels.clone(),
    })
}

/// `tr(U_qᵀ S_T U_q) / tr(U_qᵀ (S_W + εI) U_q)`.
pub fn criterion(pair: &ScatterPair, subspace: &Subspace, q: usize) -> Result<f64> {
    if q == 0 || q > subspace.p() {
        return Err(QfdaError::Dimension(format!("q = {q} must be in 1..={}", subspace.p())));
    }
    let u = subspace.u.subcols(0, q);
    let (mut num, mut den) = (0.0, 0.0);
    let st_u = &pair.s_t * u;
    let sw_u = &pair.s_w * u;
    for j in 0..q {
        for i in 0..u.nrows() {
            num += u[(i, j)] * st_u[(i, j)];
            den += u[(i, j)] * (sw_u[(i, j)] + subspace.epsilon * u[(i, j)]);
        }
    }
    if !(den > 0.0) || !num.is_finite() {
        return Err(QfdaError::Numeric(format!(
            "criterion denominator {den} is not positive"
        )));
    }
    Ok(num / den)
}

const SUBSPACE_MAGIC: &[u8; 4] = b"QSUB";
const SUBSPACE_VERSION: u32 = 1;
/// Sign convention tag: largest-magnitude entry of each column positive.
const SIGN_LARGEST_POSITIVE: u32 = 1;

/// Little-endian: magic, version, sign tag, route, d', p (u64), ε (f64),
/// column-major `U`, eigenvalues.
pub fn encode_subspace(s: &Subspace) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 8 * (s.d_prime() + 1) * s.p());
    out.extend_from_slice(SUBSPACE_MAGIC);
    out.extend_from_slice(&SUBSPACE_VERSION.to_le_bytes());
    out.extend_from_slice(&SIGN_LARGEST_POSITIVE.to_le_bytes());
    let route: u32 = match s.route {
        SolveRoute::Cholesky => 0,
        SolveRoute::Pencil => 1,
    };
    out.extend_from_slice(&route.to_le_bytes());
    out.extend_from_slice(&(s.d_prime() as u64).to_le_bytes());
    out.extend_from_slice(&(s.p() as u64).to_le_bytes());
    out.extend_from_slice(&s.epsilon.to_le_bytes());
    for j in 0..s.p() {
        for &v in s.u.col(j).iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in &s.eigenvalues {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_subspace(bytes: &[u8]) -> Result<Subspace> {
    let err = |m: &str| QfdaError::Format(format!("subspace file: {m}"));
    if bytes.len() < 40 || &bytes[..4] != SUBSPACE_MAGIC {
        return Err(err("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != SUBSPACE_VERSION {
        return Err(err("unsupported version"));
    }
    if u32_at(8) != SIGN_LARGEST_POSITIVE {
        return Err(err("unknown sign convention"));
    }
    let route = match u32_at(12) {
        0 => SolveRoute::Cholesky,
        1 => SolveRoute::Pencil,
        _ => return Err(err("unknown solve route")),
    };
    let (d, p) = (u64_at(16) as usize, u64_at(24) as usize);
    let epsilon = f64_at(32);
    let body = 40;
    if bytes.len() != body + 8 * (d * p + p) {
        return Err(err("truncated payload"));
    }
    let u = Mat::from_fn(d, p, |i, j| f64_at(body + 8 * (j * d + i)));
    let eigenvalues = (0..p).map(|i| f64_at(body + 8 * (d * p + i))).collect();
    Ok(Subspace {
        u,
        eigenvalues,
        epsilon,
        route,
    })
}

pub fn write_subspace(path: &Path, s: &Subspace) -> Result<()> {
    fs::write(path, encode_subspace(s)).map_err(|e| QfdaError::io(path, e))
}

pub fn read_subspace(path: &Path) -> Result<Subspace> {
    let bytes = fs::read(path).map_err(|e| QfdaError::io(path, e))?;
    decode_subspace(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::BlockLayout;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A spectrum set with an arbitrary d' (the layout is only carried along).
    fn set(x: Mat<f64>, labels: Vec<usize>) -> SpectrumSet {
        let mut layout = BlockLayout::new(8, 8);
        layout.d_prime = x.nrows();
        SpectrumSet {
            coeffs: x,
            layout,
            labels,
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, d: usize, n: usize, c: usize) -> SpectrumSet {
        let labels: Vec<usize> = (0..n).map(|j| j % c).collect();
        let x = Mat::from_fn(d, n, |i, j| rng.random_range(-1.0..1.0) + (labels[j] * (i % 3)) as f64);
        set(x, labels)
    }

    fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn max_abs_diff(a: &Mat<f64>, b: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                worst = worst.max((a[(i, j)] - b[(i, j)]).abs());
            }
        }
        worst
    }

    /// Sum-form scatters built from class means, independent of `H`.
    fn sum_form(s: &SpectrumSet) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let x = to_na(&s.coeffs);
        let (d, n) = x.shape();
        let c = s.num_classes();
        let mu = x.column_mean();
        let mut st = DMatrix::zeros(d, d);
        let mut sw = DMatrix::zeros(d, d);
        let mut sb = DMatrix::zeros(d, d);
        for k in 0..c {
            let members: Vec<usize> = (0..n).filter(|&j| s.labels[j] == k).collect();
            let mut mk = nalgebra::DVector::zeros(d);
            for &j in &members {
                mk += x.column(j);
            }
            mk /= members.len() as f64;
            for &j in &members {
                let v = x.column(j) - &mk;
                sw += &v * v.transpose();
            }
            let diff = &mk - &mu;
            sb += members.len() as f64 * &diff * diff.transpose();
        }
        for j in 0..n {
            let v = x.column(j) - &mu;
            st += &v * v.transpose();
        }
        (st, sw, sb)
    }

    #[test]
    fn two_points_one_class() {
        let s = set(Mat::from_fn(2, 2, |i, j| if i == 0 && j == 1 { 2.0 } else { 0.0 }), vec![0, 0]);
        let pair = plain_scatters(&s).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        assert!(max_abs_diff(&pair.s_t, &expect) < 1e-15);
        assert!(max_abs_diff(&pair.s_w, &expect) < 1e-15);
    }

    #[test]
    fn singleton_classes_have_zero_within_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = set(Mat::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)), vec![0, 1, 2]);
        let pair = plain_scatters(&s).unwrap();
        assert!(pair.s_w.norm_max() == 0.0);
    }

    #[test]
    fn empty_class_is_data_error() {
        let s = set(Mat::zeros(3, 2), vec![0, 2]);
        assert!(matches!(plain_scatters(&s), Err(QfdaError::Data(_))));
    }

    #[test]
    fn total_is_between_plus_within() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let s = random_set(&mut rng, 9, 30, 3);
            let pair = plain_scatters(&s).unwrap();
            let (st, sw, sb) = sum_form(&s);
            let scale = st.amax();
            assert!(max_abs_diff(&pair.s_t, &st) <= 1e-8 * scale);
            assert!(max_abs_diff(&pair.s_w, &sw) <= 1e-8 * scale);
            assert!(max_abs_diff(&pair.s_t, &(sb + sw)) <= 1e-8 * scale);
        }
    }

    #[test]
    fn identity_quantizer_reduces_to_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_set(&mut rng, 7, 20, 2);
        let plain = plain_scatters(&s).unwrap();
        let q = quantized_scatters(&s, &s, 0.0).unwrap();
        assert!(max_abs_diff(&q.s_t, &to_na(&plain.s_t)) < 1e-10);
        assert!(max_abs_diff(&q.s_w, &to_na(&plain.s_w)) < 1e-10);
    }

    #[test]
    fn lambda_zero_keeps_only_quantized_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_set(&mut rng, 6, 15, 3);
        let mut q = s.clone();
        q.coeffs = Mat::from_fn(6, 15, |i, j| (s.coeffs[(i, j)] * 2.0).round() / 2.0);
        let pair = quantized_scatters(&s, &q, 0.0).unwrap();
        let qq = to_na(&q.coeffs);
        let centered = &qq - qq.column_mean() * nalgebra::RowDVector::from_element(15, 1.0);
        assert!(max_abs_diff(&pair.s_t, &(&centered * centered.transpose())) < 1e-12);
    }

    #[test]
    fn symmetrized_traces_match_raw_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_set(&mut rng, 8, 25, 2);
        let mut q = s.clone();
        q.coeffs = Mat::from_fn(8, 25, |i, j| s.coeffs[(i, j)].round());
        let pair = quantized_scatters(&s, &q, 0.5).unwrap();
        let x = to_na(&s.coeffs);
        let xq = to_na(&q.coeffs);
        let ones = nalgebra::RowDVector::from_element(25, 1.0);
        let c = &x - x.column_mean() * &ones;
        let cq = &xq - xq.column_mean() * &ones;
        let raw = &cq * cq.transpose() + 0.5 * &c * cq.transpose();
        for _ in 0..20 {
            let u = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = (u.transpose() * &raw * &u).trace();
            let b = (u.transpose() * to_na(&pair.s_t) * &u).trace();
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn label_mismatch_is_consistency_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_set(&mut rng, 4, 6, 2);
        let mut q = s.clone();
        q.labels.swap(0, 1);
        assert!(matches!(quantized_scatters(&s, &q, 1.0), Err(QfdaError::Consistency(_))));
    }

    fn pair_of(s_t: Mat<f64>, s_w: Mat<f64>) -> ScatterPair {
        ScatterPair {
            s_t,
            s_w,
            lambda: 0.0,
            kind: ScatterKind::Plain,
            support: None,
        }
    }

    fn residual(pair: &ScatterPair, sub: &Subspace, j: usize) -> f64 {
        let u = sub.u.col(j).to_owned();
        let mut b = pair.s_w.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += sub.epsilon;
        }
        let r = &pair.s_t * &u - (&b * &u) * sub.eigenvalues[j];
        r.norm_l2()
    }

    #[test]
    fn diagonal_pencil() {
        let st = Mat::from_fn(2, 2, |i, j| if i == j { [3.0, 1.0][i] } else { 0.0 });
        let sub = solve_subspace(&pair_of(st, Mat::identity(2, 2)), 2, 1e-7).unwrap();
        assert!((sub.eigenvalues[0] - 3.0).abs() < 1e-6);
        assert!((sub.eigenvalues[1] - 1.0).abs() < 1e-6);
        assert!((sub.u[(0, 0)].abs() - 1.0).abs() < 1e-6 && sub.u[(1, 0)].abs() < 1e-9);
        assert_eq!(sub.route, SolveRoute::Cholesky);
    }

    #[test]
    fn equal_scatters_give_unit_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_set(&mut rng, 5, 40, 1);
        let pair = plain_scatters(&s).unwrap();
        let same = pair_of(pair.s_t.clone(), pair.s_t.clone());
        let sub = solve_subspace(&same, 5, 1e-7).unwrap();
        assert!(sub.eigenvalues.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Mat<f64> {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut m = &a * a.transpose();
        for i in 0..n {
            m[(i, i)] += shift;
        }
        m
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
        symmetrize(&Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
    }

    /// Eigenvalues of the explicit `B⁻¹ A` from nalgebra's general solver.
    fn explicit_inverse_oracle(a: &Mat<f64>, b: &Mat<f64>) -> Vec<f64> {
        let m = to_na(b).try_inverse().unwrap() * to_na(a);
        let mut v: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.re).collect();
        v.sort_by(|x, y| y.total_cmp(x));
        v
    }

    #[test]
    fn matches_general_eigensolver_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let st = random_sym(&mut rng, 6);
            let sw = random_spd(&mut rng, 6, 0.5);
            let eps = 1e-7;
            let pair = pair_of(st.clone(), sw.clone());
            let sub = solve_subspace(&pair, 6, eps).unwrap();
            let mut b = sw.clone();
            for i in 0..6 {
                b[(i, i)] += eps;
            }
            let oracle = explicit_inverse_oracle(&st, &b);
            for (a, o) in sub.eigenvalues.iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-8 * o.abs().max(1.0), "{a} vs {o}");
            }
            let norm = to_na(&st).norm();
            for j in 0..6 {
                assert!(residual(&pair, &sub, j) <= 1e-6 * norm);
                let u = sub.u.col(j).to_owned();
                let ub = (u.transpose() * &b * &u).abs();
                assert!((ub - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn indefinite_within_scatter_keeps_positive_curvature_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let st = random_spd(&mut rng, 6, 0.1);
            let mut sw = random_spd(&mut rng, 6, 0.1);
            sw[(0, 0)] -= 20.0;
            let pair = pair_of(st.clone(), sw.clone());
            let sub = solve_subspace(&pair, 3, 1e-7).unwrap();
            assert_eq!(sub.route, SolveRoute::Pencil);
            let mut b = sw.clone();
            for i in 0..6 {
                b[(i, i)] += 1e-7;
            }
            let oracle = explicit_inverse_oracle(&st, &b);
            let norm = to_na(&st).norm();
            for j in 0..3 {
                let v = sub.eigenvalues[j];
                assert!(oracle.iter().any(|o| (v - o).abs() < 1e-7 * o.abs().max(1.0)));
                assert!(residual(&pair, &sub, j) <= 1e-6 * norm);
                let u = sub.u.col(j).to_owned();
                assert!(((u.transpose() * &b * &u) - 1.0).abs() < 1e-6);
            }
            assert!(sub.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            assert!(criterion(&pair, &sub, 3).unwrap().is_finite());
        }
    }

    #[test]
    fn compressed_solve_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_set(&mut rng, 30, 12, 3);
        let mut q = s.clone();
        q.coeffs = Mat::from_fn(30, 12, |i, j| (s.coeffs[(i, j)] * 3.0).round() / 3.0);
        for lambda in [0.0, 0.5] {
            let pair = quantized_scatters(&s, &q, lambda).unwrap();
            let full = ScatterPair {
                support: None,
                ..pair.clone()
            };
            let a = solve_subspace(&pair, 4, 1e-3).unwrap();
            let b = solve_subspace(&full, 4, 1e-3).unwrap();
            for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                assert!((x - y).abs() < 1e-6 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
        let plain = plain_scatters(&s).unwrap();
        let full = ScatterPair {
            support: None,
            ..plain.clone()
        };
        let a = solve_subspace(&plain, 5, 1e-3).unwrap();
        let b = solve_subspace(&full, 5, 1e-3).unwrap();
        assert_eq!(a.route, SolveRoute::Cholesky);
        for j in 0..5 {
            for i in 0..30 {
                assert!((a.u[(i, j)] - b.u[(i, j)]).abs() < 1e-6 * b.u.norm_max());
            }
        }
    }

    #[test]
    fn pads_with_directions_outside_the_data_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let s = random_set(&mut rng, 20, 4, 2);
        let mut q = s.clone();
        q.coeffs = Mat::from_fn(20, 4, |i, j| s.coeffs[(i, j)].round());
        for pair in [plain_scatters(&s).unwrap(), quantized_scatters(&s, &q, 0.5).unwrap()] {
            let full = ScatterPair {
                support: None,
                ..pair.clone()
            };
            let a = solve_subspace(&pair, 12, 1e-2).unwrap();
            // QZ on the full problem resolves the large zero eigenspace only
            // to rounding, so it is the reference for the positive pairs only
            let b = solve_subspace(&full, 3, 1e-2).unwrap();
            let norm = to_na(&pair.s_t).norm();
            let top = b.eigenvalues[0];
            for j in 0..12 {
                if j < 3 {
                    assert!((a.eigenvalues[j] - b.eigenvalues[j]).abs() < 1e-6 * top);
                } else {
                    assert!(a.eigenvalues[j].abs() <= 1e-8 * top);
                }
                assert!(residual(&pair, &a, j) <= 1e-6 * norm);
            }
            // B-orthonormal columns
            let mut bm = pair.s_w.clone();
            for i in 0..20 {
                bm[(i, i)] += 1e-2;
            }
            let g = a.u.transpose() * &bm * &a.u;
            for i in 0..12 {
                for j in 0..12 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((g[(i, j)] - target).abs() < 1e-6, "{i},{j}: {}", g[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn sign_convention_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_set(&mut rng, 10, 30, 3);
        let pair = plain_scatters(&s).unwrap();
        let a = solve_subspace(&pair, 4, 1e-7).unwrap();
        let b = solve_subspace(&pair, 4, 1e-7).unwrap();
        assert_eq!(a, b);
        for j in 0..4 {
            let col: Vec<f64> = a.u.col(j).iter().copied().collect();
            let peak = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(peak > 0.0);
        }
        assert!(a.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_bad_arguments() {
        let pair = pair_of(Mat::identity(3, 3), Mat::identity(3, 3));
        assert!(matches!(solve_subspace(&pair, 4, 1e-7), Err(QfdaError::Dimension(_))));
        assert!(matches!(solve_subspace(&pair, 2, 0.0), Err(QfdaError::Value(_))));
        let mut bad = pair.clone();
        bad.s_t[(0, 0)] = f64::NAN;
        assert!(matches!(solve_subspace(&bad, 2, 1e-7), Err(QfdaError::Numeric(_))));
    }

    fn sub_with(u: Mat<f64>, eps: f64) -> Subspace {
        let p = u.ncols();
        Subspace {
            u,
            eigenvalues: vec![0.0; p],
            epsilon: eps,
            route: SolveRoute::Cholesky,
        }
    }

    #[test]
    fn identity_projection_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_set(&mut rng, 5, 7, 1);
        let sub = sub_with(Mat::identity(5, 5), 1e-7);
        let full = project(&sub, &s, 5).unwrap();
        assert_eq!(full.coords, s.coeffs);
        let one = project(&sub, &s, 1).unwrap();
        assert_eq!(one.coords.nrows(), 1);
        assert_eq!(one.labels, s.labels);
        assert!(matches!(project(&sub, &s, 6), Err(QfdaError::Dimension(_))));
        assert!(matches!(project(&sub, &s, 0), Err(QfdaError::Dimension(_))));
    }

    #[test]
    fn full_orthonormal_basis_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_set(&mut rng, 6, 20, 1);
        let pair = plain_scatters(&s).unwrap();
        let pca = pair_of(pair.s_t.clone(), Mat::zeros(6, 6));
        // S_W = 0 and ε = 1: B = I, so the columns are orthonormal
        let sub = solve_subspace(&pca, 6, 1.0).unwrap();
        let proj = project(&sub, &s, 6).unwrap();
        let back = &sub.u * &proj.coords;
        assert!(max_abs_diff(&back, &to_na(&s.coeffs)) < 1e-8);
    }

    #[test]
    fn proportional_pencil_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sw = random_spd(&mut rng, 5, 1.0);
        let st = Mat::from_fn(5, 5, |i, j| 2.0 * sw[(i, j)]);
        let pair = pair_of(st, sw);
        let u = Mat::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let f = criterion(&pair, &sub_with(u, 1e-12), 2).unwrap();
        assert!((f - 2.0).abs() < 1e-9);
    }

    #[test]
    fn criterion_is_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = random_set(&mut rng, 6, 30, 2);
        let mut big = s.clone();
        big.coeffs = Mat::from_fn(6, 30, |i, j| 10.0 * s.coeffs[(i, j)]);
        let eps = 1e-9;
        let a = plain_scatters(&s).unwrap();
        let b = plain_scatters(&big).unwrap();
        let u = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let fa = criterion(&a, &sub_with(u.clone(), eps), 3).unwrap();
        let fb = criterion(&b, &sub_with(u, eps), 3).unwrap();
        assert!((fa - fb).abs() < 1e-6 * fa);
    }

    #[test]
    fn eigen_solution_beats_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = random_set(&mut rng, 8, 40, 3);
        let pair = plain_scatters(&s).unwrap();
        let sub = solve_subspace(&pair, 8, 1e-7).unwrap();
        for q in [1, 3] {
            let best = criterion(&pair, &sub, q).unwrap();
            for _ in 0..100 {
                let raw = Mat::from_fn(8, q, |_, _| rng.random_range(-1.0..1.0));
                let qr = raw.qr();
                let f = criterion(&pair, &sub_with(qr.compute_thin_Q(), 1e-7), q).unwrap();
                assert!(f <= best + 1e-9 * best);
            }
        }
    }

    #[test]
    fn nonpositive_denominator_is_numeric_error() {
        let pair = pair_of(Mat::identity(2, 2), Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 }));
        let sub = sub_with(Mat::identity(2, 1), 1e-7);
        assert!(matches!(criterion(&pair, &sub, 1), Err(QfdaError::Numeric(_))));
    }

    #[test]
    fn subspace_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random_set(&mut rng, 9, 20, 2);
        let sub = solve_subspace(&plain_scatters(&s).unwrap(), 3, 1e-7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subspace.bin");
        write_subspace(&path, &sub).unwrap();
        assert_eq!(read_subspace(&path).unwrap(), sub);
        let bytes = encode_subspace(&sub);
        assert!(decode_subspace(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_subspace(b"XSUB0000000000000000000000000000000000000000").is_err());
    }
}

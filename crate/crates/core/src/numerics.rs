//! Dense linear algebra used across the toolkit.
//!
//! Storage is `nalgebra::DMatrix<f64>`. The symmetric eigensolver, the
//! Lyapunov/Sylvester solvers and pole placement are implemented here; the
//! general (nonsymmetric) spectrum, SVD and matrix exponential come from
//! nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type Complex64 = Complex<f64>;

/// Tolerances shared by the solvers.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub symmetry: f64,
    pub eig_residual: f64,
    pub lyapunov_residual: f64,
    pub psd_clamp: f64,
    pub hurwitz: f64,
    pub pivot: f64,
}

pub const TOL: Tolerances = Tolerances {
    symmetry: 1e-9,
    eig_residual: 1e-8,
    lyapunov_residual: 1e-7,
    psd_clamp: 1e-9,
    hurwitz: 1e-9,
    pivot: 1e-13,
};

fn require_square(a: &Mat, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Largest absolute entry.
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal, column `i` belongs to `values[i]`.
    pub vectors: Mat,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig(s: &Mat) -> Result<SymEig> {
    let n = require_square(s, "sym_eig")?;
    let scale = s.norm().max(1.0);
    let asym = (s - s.transpose()).norm();
    if asym > TOL.symmetry * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let mut a = symmetrize(s);
    let mut v = Mat::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Gaussian elimination with partial pivoting, `A X = B`.
pub fn solve_linear(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = require_square(a, "solve_linear")?;
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "solve_linear: rhs has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, m[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= TOL.pivot * scale {
            return Err(Error::Singular(format!("pivot {pval:.3e} at column {k}")));
        }
        if piv != k {
            m.swap_rows(piv, k);
            x.swap_rows(piv, k);
        }
        let d = m[(k, k)];
        for i in (k + 1)..n {
            let f = m[(i, k)] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
            for j in 0..x.ncols() {
                x[(i, j)] -= f * x[(k, j)];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut s = x[(k, j)];
            for i in (k + 1)..n {
                s -= m[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = s / m[(k, k)];
        }
    }
    Ok(x)
}

fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Mat::from_fn(ar * br, ac * bc, |r, c| {
        a[(r / br, c / bc)] * b[(r % br, c % bc)]
    })
}

fn vec_of(a: &Mat) -> Mat {
    Mat::from_column_slice(a.len(), 1, a.as_slice())
}

fn unvec(v: &Mat, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

/// Solves `AᵀX + XA + Q = 0` through the Kronecker form.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = require_square(a, "solve_lyapunov")?;
    if q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "solve_lyapunov: Q is {}x{}, expected {n}x{n}",
            q.nrows(),
            q.ncols()
        )));
    }
    let at = a.transpose();
    let eye = Mat::identity(n, n);
    let k = kron(&eye, &at) + kron(&at, &eye);
    let rhs = -vec_of(q);
    let x = match solve_linear(&k, &rhs) {
        Ok(x) => unvec(&x, n, n),
        Err(Error::Singular(msg)) => {
            return Err(Error::Solver(format!("singular Lyapunov operator ({msg})")))
        }
        Err(e) => return Err(e),
    };
    let x = if (q - q.transpose()).norm() <= TOL.symmetry * q.norm().max(1.0) {
        symmetrize(&x)
    } else {
        x
    };
    let res = (&at * &x + &x * a + q).norm();
    let bound = TOL.lyapunov_residual * (a.norm() * x.norm() + q.norm());
    if res > bound {
        return Err(Error::Solver(format!(
            "Lyapunov residual {res:.3e} exceeds {bound:.3e}"
        )));
    }
    Ok(x)
}

/// Solves `AX + XB = C`.
pub fn solve_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat> {
    let n = require_square(a, "solve_sylvester")?;
    let m = require_square(b, "solve_sylvester")?;
    if c.shape() != (n, m) {
        return Err(Error::Dimension(format!(
            "solve_sylvester: C is {}x{}, expected {n}x{m}",
            c.nrows(),
            c.ncols()
        )));
    }
    let k = kron(&Mat::identity(m, m), a) + kron(&b.transpose(), &Mat::identity(n, n));
    let x = solve_linear(&k, &vec_of(c))
        .map_err(|e| Error::Solver(format!("singular Sylvester operator ({e})")))?;
    Ok(unvec(&x, n, m))
}

/// Symmetric PSD square root.
pub fn psd_sqrt(m: &Mat) -> Result<Mat> {
    let e = sym_eig(m)?;
    let min = e.values.first().copied().unwrap_or(0.0);
    if min < -TOL.psd_clamp {
        return Err(Error::NotPsd(min));
    }
    let d = Mat::from_diagonal(&Vector::from_iterator(
        e.values.len(),
        e.values.iter().map(|v| v.max(0.0).sqrt()),
    ));
    Ok(symmetrize(&(&e.vectors * d * e.vectors.transpose())))
}

/// Largest singular value, from the Gram matrix.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let g = a.transpose() * a;
    match sym_eig(&symmetrize(&g)) {
        Ok(e) => e.values.last().copied().unwrap_or(0.0).max(0.0).sqrt(),
        Err(_) => 0.0,
    }
}

pub fn eigenvalues(a: &Mat) -> Result<Vec<Complex64>> {
    require_square(a, "eigenvalues")?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    Ok(a.clone().complex_eigenvalues().iter().copied().collect())
}

#[derive(Debug, Clone, Copy)]
pub struct HurwitzReport {
    pub hurwitz: bool,
    pub abscissa: f64,
}

/// Hurwitz test via the spectral abscissa.
pub fn is_hurwitz(a: &Mat) -> Result<HurwitzReport> {
    let ev = eigenvalues(a)?;
    let abscissa = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(HurwitzReport {
        hurwitz: abscissa < -TOL.hurwitz,
        abscissa,
    })
}

/// Lyapunov feasibility: `AᵀX + XA = −I` has a positive definite solution.
pub fn lyapunov_stable(a: &Mat) -> bool {
    let n = a.nrows();
    match solve_lyapunov(a, &Mat::identity(n, n)) {
        Ok(x) => sym_eig(&x)
            .map(|e| e.values.first().copied().unwrap_or(1.0) > 0.0)
            .unwrap_or(false),
        Err(_) => false,
    }
}

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub x: Mat,
    pub residual: f64,
    pub rank_deficient: bool,
}

/// Minimum-norm least squares via SVD.
pub fn least_squares(a: &Mat, b: &Mat) -> Result<LeastSquares> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "least_squares: A has {} rows, B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |m, v| m.max(*v));
    let cut = smax * f64::EPSILON * (a.nrows().max(a.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|s| **s > cut).count();
    let x = svd
        .solve(b, cut)
        .map_err(|e| Error::Solver(format!("least squares: {e}")))?;
    let residual = (a * &x - b).norm();
    Ok(LeastSquares {
        x,
        residual,
        rank_deficient: rank < a.ncols(),
    })
}

pub fn expm(a: &Mat) -> Mat {
    a.clone().exp()
}

/// Moore–Penrose pseudo-inverse.
pub fn pinv(a: &Mat) -> Result<Mat> {
    least_squares(a, &Mat::identity(a.nrows(), a.nrows())).map(|l| l.x)
}

/// Monic real polynomial with the given roots, highest degree first.
pub fn char_poly(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.iter().map(|z| z.re).collect()
}

/// Single-input Ackermann formula. Returns `K` (1×n) so that `A + bK` has
/// the requested spectrum.
pub fn ackermann(a: &Mat, b: &Mat, poles: &[Complex64]) -> Result<Mat> {
    let n = require_square(a, "ackermann")?;
    if b.shape() != (n, 1) || poles.len() != n {
        return Err(Error::Dimension(format!(
            "ackermann: need b {n}x1 and {n} poles, got b {}x{} and {} poles",
            b.nrows(),
            b.ncols(),
            poles.len()
        )));
    }
    let mut ctrb = Mat::zeros(n, n);
    let mut col = b.clone();
    for k in 0..n {
        ctrb.set_column(k, &col.column(0));
        col = a * col;
    }
    let coeffs = char_poly(poles);
    let mut phi = Mat::zeros(n, n);
    let mut pow = Mat::identity(n, n);
    for k in (0..=n).rev() {
        phi += &pow * coeffs[k];
        pow = &pow * a;
    }
    let sol = solve_linear(&ctrb, &phi)
        .map_err(|e| Error::Unstabilizable(format!("controllability matrix singular: {e}")))?;
    Ok(-sol.rows(n - 1, 1).into_owned())
}

fn left_eigvec(a: &Mat, mu: Complex64) -> Result<nalgebra::DVector<Complex64>> {
    let n = a.nrows();
    let shift = mu + Complex64::new(1e-10 * (1.0 + mu.norm()), 1e-12);
    let m = DMatrix::<Complex64>::from_fn(n, n, |r, c| {
        let v = Complex64::new(a[(c, r)], 0.0);
        if r == c {
            v - shift
        } else {
            v
        }
    });
    let lu = m.lu();
    let mut w = nalgebra::DVector::<Complex64>::from_fn(n, |i, _| {
        Complex64::new(1.0 + 0.1 * i as f64, 0.05 * i as f64)
    });
    for _ in 0..4 {
        w = lu
            .solve(&w)
            .ok_or_else(|| Error::Solver("inverse iteration failed".into()))?;
        let nrm = w.norm();
        w /= Complex64::new(nrm, 0.0);
    }
    Ok(w)
}

/// Partial (modal) pole placement for a single input.
///
/// Eigenvalues of `A` that already appear in `targets` stay where they are;
/// the rest are moved onto the unmatched targets by running Ackermann on the
/// left-invariant subspace of the moved modes. Falls back to full Ackermann
/// when that subspace is ill-posed.
pub fn modal_place(a: &Mat, b: &Mat, targets: &[Complex64]) -> Result<Mat> {
    let n = require_square(a, "modal_place")?;
    if targets.len() != n {
        return Err(Error::Dimension(format!(
            "modal_place: {} targets for order {n}",
            targets.len()
        )));
    }
    let ev = eigenvalues(a)?;
    let mut free: Vec<Complex64> = targets.to_vec();
    let mut moved = Vec::new();
    for e in &ev {
        let hit = free
            .iter()
            .position(|t| (t - e).norm() <= 1e-6 * e.norm().max(1.0));
        match hit {
            Some(k) => {
                free.remove(k);
            }
            None => moved.push(*e),
        }
    }
    if moved.is_empty() {
        return Ok(Mat::zeros(1, n));
    }
    let mut cols: Vec<Vector> = Vec::new();
    for e in &moved {
        if e.im.abs() > 1e-12 && e.im < 0.0 {
            continue;
        }
        let w = left_eigvec(a, *e)?;
        cols.push(Vector::from_iterator(n, w.iter().map(|z| z.re)));
        if e.im.abs() > 1e-12 {
            cols.push(Vector::from_iterator(n, w.iter().map(|z| z.im)));
        }
    }
    if cols.len() != moved.len() {
        return ackermann(a, b, targets);
    }
    let w = Mat::from_columns(&cols);
    let wt = w.transpose();
    let lam = &wt * a * pinv(&wt)?;
    let bt = &wt * b;
    let k = match ackermann(&lam, &bt, &free) {
        Ok(k) => &k * &wt,
        Err(_) => return ackermann(a, b, targets),
    };
    let achieved = eigenvalues(&(a + b * &k))?;
    let scale = targets.iter().map(|t| t.norm()).fold(1.0, f64::max);
    if spectrum_distance(&achieved, targets) <= 1e-4 * scale {
        return Ok(k);
    }
    // repeated targets split under rounding; keeping the abscissa is enough
    let want = targets.iter().map(|t| t.re).fold(f64::NEG_INFINITY, f64::max);
    let got = achieved.iter().map(|t| t.re).fold(f64::NEG_INFINITY, f64::max);
    if got <= want + 1e-3 * scale {
        return Ok(k);
    }
    ackermann(a, b, targets)
}

/// Greedy matching distance between two spectra.
pub fn spectrum_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    let mut rest: Vec<Complex64> = b.to_vec();
    let mut worst: f64 = 0.0;
    for z in a {
        if rest.is_empty() {
            return f64::INFINITY;
        }
        let (k, d) = rest
            .iter()
            .enumerate()
            .map(|(k, t)| (k, (t - z).norm()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        worst = worst.max(d);
        rest.remove(k);
    }
    if rest.is_empty() {
        worst
    } else {
        f64::INFINITY
    }
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv(path: &std::path::Path, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &std::path::Path) -> Result<Mat> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let row = rec?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(format!("{} row {}", path.display(), k + 1), e)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse(path.display().to_string(), "matrix rows must be non-empty and equally long"));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}


/// Serde adapter storing a matrix as a list of rows.
pub mod mat_rows {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Mat::from_fn(nr, nc, |r, c| rows[r][c]))
    }
}

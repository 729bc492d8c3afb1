//! Robust simulation functions with disturbance refinement.
//!
//! A certificate binds a concrete model `m1` to an abstraction `m2` through
//! `V(x₁,x₂) = ‖√M (x₁ − P x₂)‖` and the interfaces `u_V`, `d_V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{rk4_step, Signal, SystemModel, Trace};
use crate::numerics::{
    self, least_squares, mat_rows, modal_place, psd_sqrt, solve_lyapunov, solve_sylvester,
    spectral_norm, sym_eig, symmetrize, Complex64, Mat, Vector,
};
use crate::reduction::balanced_truncate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfCertificate {
    #[serde(rename = "M", with = "mat_rows")]
    pub m: Mat,
    pub lambda: f64,
    #[serde(rename = "P", with = "mat_rows")]
    pub p: Mat,
    #[serde(rename = "K1", with = "mat_rows")]
    pub k1: Mat,
    #[serde(rename = "K2", with = "mat_rows")]
    pub k2: Mat,
    #[serde(rename = "Q1", with = "mat_rows")]
    pub q1: Mat,
    #[serde(rename = "Q2", with = "mat_rows")]
    pub q2: Mat,
    #[serde(rename = "R1", with = "mat_rows")]
    pub r1: Mat,
    #[serde(rename = "R2", with = "mat_rows")]
    pub r2: Mat,
    #[serde(rename = "L11", with = "mat_rows")]
    pub l11: Mat,
    #[serde(rename = "L12", with = "mat_rows")]
    pub l12: Mat,
    #[serde(rename = "L21", with = "mat_rows")]
    pub l21: Mat,
    #[serde(rename = "L22", with = "mat_rows")]
    pub l22: Mat,
    pub delta_bar: f64,
}

impl RsfCertificate {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("certificate line {}", e.line()), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Checks every shape against the model pair.
    pub fn check(&self, m1: &SystemModel, m2: &SystemModel) -> Result<()> {
        let (n1, n2) = (m1.n(), m2.n());
        let (p1, p2) = (m1.p(), m2.p());
        let (d1, d2) = (m1.q() + m1.r(), m2.q() + m2.r());
        let shapes: [(&str, &Mat, (usize, usize)); 12] = [
            ("M", &self.m, (n1, n1)),
            ("P", &self.p, (n1, n2)),
            ("K1", &self.k1, (d2, n1)),
            ("K2", &self.k2, (p1, n1)),
            ("Q1", &self.q1, (d2, n1)),
            ("Q2", &self.q2, (p1, n2)),
            ("R1", &self.r1, (d2, d1)),
            ("R2", &self.r2, (p1, p2)),
            ("L11", &self.l11, (d2, 1)),
            ("L12", &self.l12, (d2, 1)),
            ("L21", &self.l21, (p1, 1)),
            ("L22", &self.l22, (p1, 1)),
        ];
        for (name, m, want) in shapes {
            if m.shape() != want {
                return Err(Error::Dimension(format!(
                    "certificate {name} is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    want.0,
                    want.1
                )));
            }
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidCertificate(format!("lambda = {} must be positive", self.lambda)));
        }
        if m2.c.nrows() != m1.c.nrows() {
            return Err(Error::Dimension("outputs of the two models differ in size".into()));
        }
        Ok(())
    }

    pub fn sqrt_m(&self) -> Result<Mat> {
        psd_sqrt(&symmetrize(&self.m))
    }
}

/// `H` at slope `δ`.
pub fn build_h_at(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel, delta: f64) -> Result<Mat> {
    cert.check(m1, m2)?;
    let pd2 = &cert.p * m2.d();
    let lin = &m1.a - &pd2 * (&cert.k1 + &cert.q1) + &m1.b * &cert.k2;
    let nl = (&m1.e + &m1.b * &cert.l21 - &pd2 * &cert.l11) * &m1.f;
    Ok(lin + nl * delta)
}

/// `H` at the worst-case slope `δ̄`.
pub fn build_h(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel) -> Result<Mat> {
    build_h_at(cert, m1, m2, cert.delta_bar)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LmiReport {
    /// `min eig(M − C₁ᵀC₁)`.
    pub lmi_a_margin: f64,
    /// `−max eig(HᵀM + MH + 2λM)` at `δ̄`.
    pub lmi_b_margin: f64,
    /// Same margin at the lower slope bound.
    pub lmi_b_margin_lower: f64,
    pub hurwitz: bool,
    pub abscissa: f64,
}

impl LmiReport {
    pub fn pass(&self) -> bool {
        self.pass_with(-1e-6)
    }

    pub fn pass_with(&self, tol: f64) -> bool {
        self.lmi_a_margin >= tol && self.lmi_b_margin >= tol
    }

    /// Margins hold on the whole slope sector.
    pub fn pass_sector(&self, tol: f64) -> bool {
        self.pass_with(tol) && self.lmi_b_margin_lower >= tol
    }
}

fn lmi_b(h: &Mat, m: &Mat, lambda: f64) -> Result<f64> {
    let s = symmetrize(&(h.transpose() * m + m * h + m * (2.0 * lambda)));
    Ok(-sym_eig(&s)?.values.last().copied().unwrap_or(0.0))
}

pub fn verify_lmis(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel) -> Result<LmiReport> {
    let m = symmetrize(&cert.m);
    let ctc = m1.c.transpose() * &m1.c;
    let lmi_a_margin = sym_eig(&symmetrize(&(&m - ctc)))?.values[0];
    let h = build_h(cert, m1, m2)?;
    let h_lo = build_h_at(cert, m1, m2, m1.phi.a.min(cert.delta_bar))?;
    let hw = numerics::is_hurwitz(&h)?;
    Ok(LmiReport {
        lmi_a_margin,
        lmi_b_margin: lmi_b(&h, &m, cert.lambda)?,
        lmi_b_margin_lower: lmi_b(&h_lo, &m, cert.lambda)?,
        hurwitz: hw.hurwitz,
        abscissa: hw.abscissa,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EqualityReport {
    /// Frobenius residuals of C₂=C₁P, F₂=F₁P, the state equality and the
    /// nonlinearity equality.
    pub residuals: [f64; 4],
    pub tol: f64,
}

impl EqualityReport {
    pub fn pass(&self) -> bool {
        self.residuals.iter().all(|r| *r <= self.tol)
    }
}

pub fn verify_equalities(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel, tol: f64) -> Result<EqualityReport> {
    cert.check(m1, m2)?;
    let p = &cert.p;
    let pd2 = p * m2.d();
    let ra = (&m2.c - &m1.c * p).norm();
    let rb = (&m2.f - &m1.f * p).norm();
    let rc = (&m1.a * p + &m1.b * &cert.q2 - p * &m2.a - &pd2 * &cert.q1 * p).norm();
    let rhs_d = p * &m2.e - &m1.b * (&cert.l21 - &cert.l22) + &pd2 * (&cert.l11 - &cert.l12);
    let rd = (&m1.e - rhs_d).norm();
    Ok(EqualityReport { residuals: [ra, rb, rc, rd], tol })
}

/// Linear gain coefficients `(c1, c2)` of `γ₁`, `γ₂`.
pub fn gamma_coefficients(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel) -> Result<(f64, f64)> {
    cert.check(m1, m2)?;
    let rm = cert.sqrt_m()?;
    let dmis = m1.d() - &cert.p * m2.d() * &cert.r1;
    let bmis = &m1.b * &cert.r2 - &cert.p * &m2.b;
    Ok((
        spectral_norm(&(&rm * dmis)) / cert.lambda,
        spectral_norm(&(&rm * bmis)) / cert.lambda,
    ))
}

/// Per-column version of `c1`, one entry per concrete disturbance channel.
pub fn channel_gains(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel) -> Result<Vec<f64>> {
    cert.check(m1, m2)?;
    let rm = cert.sqrt_m()?;
    let dmis = &rm * (m1.d() - &cert.p * m2.d() * &cert.r1);
    Ok(dmis.column_iter().map(|c| c.norm() / cert.lambda).collect())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpsilonQuery {
    pub d_max: f64,
    pub u2_max: f64,
    #[serde(default)]
    pub x1_0: Option<Vec<f64>>,
    #[serde(default)]
    pub x2_0: Option<Vec<f64>>,
}

pub fn eval_v(cert: &RsfCertificate, x1: &Vector, x2: &Vector) -> f64 {
    let e = x1 - &cert.p * x2;
    let m = symmetrize(&cert.m);
    (e.dot(&(&m * &e))).max(0.0).sqrt()
}

pub fn epsilon_bound(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel, q: &EpsilonQuery) -> Result<f64> {
    if q.d_max < 0.0 || q.u2_max < 0.0 {
        return Err(Error::InvalidArgument("d_max and u2_max must be non-negative".into()));
    }
    let (c1, c2) = gamma_coefficients(cert, m1, m2)?;
    let v0 = match (&q.x1_0, &q.x2_0) {
        (Some(a), Some(b)) => {
            if a.len() != m1.n() || b.len() != m2.n() {
                return Err(Error::Dimension("initial states do not match the models".into()));
            }
            eval_v(cert, &Vector::from_row_slice(a), &Vector::from_row_slice(b))
        }
        _ => 0.0,
    };
    Ok(v0.max(c1 * q.d_max + c2 * q.u2_max))
}

fn phi_at(m1: &SystemModel, row: &Mat, x: &Vector) -> f64 {
    m1.phi.eval((row * x)[0])
}

/// `u_V = K₂(x₁−Px₂) + Q₂x₂ + R₂u₂ + L₂₁φ(F₁x₁) − L₂₂φ(F₁Px₂)`.
pub fn interface_u(cert: &RsfCertificate, m1: &SystemModel, x1: &Vector, x2: &Vector, u2: &Vector) -> Result<Vector> {
    if x1.len() != cert.p.nrows() || x2.len() != cert.p.ncols() || u2.len() != cert.r2.ncols() {
        return Err(Error::Dimension("interface_u: argument sizes do not match the certificate".into()));
    }
    Ok(interface_u_raw(cert, m1, x1, x2, u2))
}

pub(crate) fn interface_u_raw(cert: &RsfCertificate, m1: &SystemModel, x1: &Vector, x2: &Vector, u2: &Vector) -> Vector {
    let px2 = &cert.p * x2;
    let mut u = &cert.k2 * (x1 - &px2) + &cert.q2 * x2 + &cert.r2 * u2;
    let (f1, f2) = (phi_at(m1, &m1.f, x1), phi_at(m1, &m1.f, &px2));
    u += cert.l21.column(0) * f1 - cert.l22.column(0) * f2;
    u
}

/// `d_V = K₁(x₁−Px₂) + Q₁x₁ + R₁d₁ + L₁₁φ(F₁x₁) − L₁₂φ(F₁Px₂)`.
pub fn interface_d(cert: &RsfCertificate, m1: &SystemModel, x1: &Vector, x2: &Vector, d1: &Vector) -> Result<Vector> {
    if x1.len() != cert.p.nrows() || x2.len() != cert.p.ncols() || d1.len() != cert.r1.ncols() {
        return Err(Error::Dimension("interface_d: argument sizes do not match the certificate".into()));
    }
    Ok(interface_d_raw(cert, m1, x1, x2, d1))
}

pub(crate) fn interface_d_raw(cert: &RsfCertificate, m1: &SystemModel, x1: &Vector, x2: &Vector, d1: &Vector) -> Vector {
    let px2 = &cert.p * x2;
    let mut d = &cert.k1 * (x1 - &px2) + &cert.q1 * x1 + &cert.r1 * d1;
    let (f1, f2) = (phi_at(m1, &m1.f, x1), phi_at(m1, &m1.f, &px2));
    d += cert.l11.column(0) * f1 - cert.l12.column(0) * f2;
    d
}

/// Gains held fixed during construction.
#[derive(Debug, Clone)]
pub struct FixedGains {
    pub k1: Mat,
    pub q1: Mat,
    pub r1: Mat,
    pub r2: Mat,
    pub l11: Mat,
    pub l12: Mat,
    pub l21: Mat,
    pub l22: Mat,
    pub delta_bar: f64,
}

impl FixedGains {
    /// All couplings zero, `R₁ = R₂ = I`, `δ̄` the upper slope of `φ`.
    pub fn standard(m1: &SystemModel, m2: &SystemModel) -> Result<Self> {
        let (d1, d2) = (m1.q() + m1.r(), m2.q() + m2.r());
        if d1 != d2 || m1.p() != m2.p() {
            return Err(Error::Dimension(
                "standard gains need matching input and disturbance counts".into(),
            ));
        }
        Ok(FixedGains {
            k1: Mat::zeros(d2, m1.n()),
            q1: Mat::zeros(d2, m1.n()),
            r1: Mat::identity(d2, d1),
            r2: Mat::identity(m1.p(), m2.p()),
            l11: Mat::zeros(d2, 1),
            l12: Mat::zeros(d2, 1),
            l21: Mat::zeros(m1.p(), 1),
            l22: Mat::zeros(m1.p(), 1),
            delta_bar: m1.phi.b,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Construction {
    pub cert: RsfCertificate,
    pub q2_residual: f64,
    pub lmis: LmiReport,
    pub equalities: EqualityReport,
}

/// Keeps fast eigenvalues of `h_base` and moves the rest to `−(λ+1)`.
pub fn default_pole_targets(h_base: &Mat, lambda: f64) -> Result<Vec<Complex64>> {
    Ok(numerics::eigenvalues(h_base)?
        .into_iter()
        .map(|e| if e.re > -(lambda + 0.8) { Complex64::new(-(lambda + 1.0), 0.0) } else { e })
        .collect())
}

/// Smallest `σ ≥ 1` with `σM − C₁ᵀC₁ ⪰ 0`.
fn output_scale(m: &Mat, c1: &Mat) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("Lyapunov solution is not positive definite".into()))?;
    let l = chol.l();
    let li = numerics::solve_linear(&l, &Mat::identity(l.nrows(), l.nrows()))?;
    let g = symmetrize(&(&li * c1.transpose() * c1 * li.transpose()));
    let top = sym_eig(&g)?.values.last().copied().unwrap_or(0.0);
    Ok(top.max(1.0) * (1.0 + 1e-9))
}

/// Lyapunov-based certificate for a given projection `P`.
pub fn construct_certificate(
    m1: &SystemModel,
    m2: &SystemModel,
    p: &Mat,
    lambda: f64,
    fixed: &FixedGains,
    pole_targets: Option<&[Complex64]>,
    tol: f64,
) -> Result<Construction> {
    if m1.p() != 1 {
        return Err(Error::InvalidArgument(format!(
            "pole placement needs a single input, model has {}",
            m1.p()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let pd2 = p * m2.d();
    let rhs = p * &m2.a + &pd2 * &fixed.q1 * p - &m1.a * p;
    let ls = least_squares(&m1.b, &rhs)?;
    let h_base = &m1.a - &pd2 * (&fixed.k1 + &fixed.q1)
        + (&m1.e + &m1.b * &fixed.l21 - &pd2 * &fixed.l11) * &m1.f * fixed.delta_bar;
    let targets = match pole_targets {
        Some(t) => t.to_vec(),
        None => default_pole_targets(&h_base, lambda)?,
    };
    if let Some(bad) = targets.iter().find(|t| t.re >= -lambda) {
        return Err(Error::InvalidArgument(format!(
            "pole target {bad} is not left of -lambda = {}",
            -lambda
        )));
    }
    let k2 = modal_place(&h_base, &m1.b, &targets)?;
    let h = &h_base + &m1.b * &k2;
    let n = m1.n();
    let shifted = &h + Mat::identity(n, n) * lambda;
    let q = m1.c.transpose() * &m1.c + Mat::identity(n, n) * 1e-6;
    let m0 = symmetrize(&solve_lyapunov(&shifted, &q)?);
    let m = &m0 * output_scale(&m0, &m1.c)?;
    let cert = RsfCertificate {
        m,
        lambda,
        p: p.clone(),
        k1: fixed.k1.clone(),
        k2,
        q1: fixed.q1.clone(),
        q2: ls.x,
        r1: fixed.r1.clone(),
        r2: fixed.r2.clone(),
        l11: fixed.l11.clone(),
        l12: fixed.l12.clone(),
        l21: fixed.l21.clone(),
        l22: fixed.l22.clone(),
        delta_bar: fixed.delta_bar,
    };
    let lmis = verify_lmis(&cert, m1, m2)?;
    let equalities = verify_equalities(&cert, m1, m2, tol)?;
    if !equalities.pass() {
        return Err(Error::EqualityResidual { tol, residuals: equalities.residuals });
    }
    if !lmis.pass_sector(-1e-6) {
        return Err(Error::InvalidCertificate(format!(
            "constructed certificate fails the matrix inequalities: {lmis:?}"
        )));
    }
    Ok(Construction { cert, q2_residual: ls.residual, lmis, equalities })
}

/// Projection solving the state equality exactly (for `Q₁ = 0`), with `Q₂`
/// chosen so that `P` is as close as possible to `p_ref`.
pub fn refine_projection(m1: &SystemModel, a2: &Mat, p_ref: &Mat) -> Result<(Mat, Mat)> {
    let (n1, n2, p1) = (m1.n(), a2.nrows(), m1.p());
    let mut basis = Vec::new();
    for i in 0..p1 {
        for j in 0..n2 {
            let mut q = Mat::zeros(p1, n2);
            q[(i, j)] = 1.0;
            basis.push((q.clone(), solve_sylvester(&m1.a, &(-a2), &(-(&m1.b * q)))?));
        }
    }
    let g = Mat::from_fn(n1 * n2, basis.len(), |r, c| basis[c].1.as_slice()[r]);
    let target = Mat::from_column_slice(n1 * n2, 1, p_ref.as_slice());
    let coef = least_squares(&g, &target)?.x;
    let mut p = Mat::zeros(n1, n2);
    let mut q2 = Mat::zeros(p1, n2);
    for (k, (qk, pk)) in basis.iter().enumerate() {
        p += pk * coef[(k, 0)];
        q2 += qk * coef[(k, 0)];
    }
    Ok((p, q2))
}

/// M-weighted least-squares choice of `B₂` (and `D₂` when it does not enter
/// any equality). Returns which of the two were updated.
pub fn match_abstract_channels(cert: &RsfCertificate, m1: &SystemModel, m2: &mut SystemModel) -> Result<(bool, bool)> {
    cert.check(m1, m2)?;
    let m = symmetrize(&cert.m);
    let ptm = cert.p.transpose() * &m;
    let gram = &ptm * &cert.p;
    m2.b = numerics::solve_linear(&gram, &(&ptm * &m1.b * &cert.r2))?;
    let d_free = [&cert.k1, &cert.q1, &cert.l11, &cert.l12].iter().all(|x| x.iter().all(|v| *v == 0.0));
    let r1_square = cert.r1.nrows() == cert.r1.ncols();
    if d_free && r1_square {
        if let Some(r1i) = cert.r1.clone().try_inverse() {
            let d2 = numerics::solve_linear(&gram, &(&ptm * m1.d() * r1i))?;
            m2.set_d(&d2)?;
            return Ok((true, true));
        }
    }
    Ok((true, false))
}

/// Scalar `R₁`, `R₂` minimizing `c1·d_max + c2·u2_max`.
pub fn optimize_gains(cert: &RsfCertificate, m1: &SystemModel, m2: &SystemModel, d_max: f64, u2_max: f64) -> Result<RsfCertificate> {
    if cert.r1.shape() != (1, 1) || cert.r2.shape() != (1, 1) {
        return Err(Error::InvalidArgument("gain search needs scalar R1 and R2".into()));
    }
    let mut best = cert.clone();
    let cost = |c: &RsfCertificate| -> f64 {
        gamma_coefficients(c, m1, m2).map(|(a, b)| a * d_max + b * u2_max).unwrap_or(f64::INFINITY)
    };
    for which in 0..2 {
        let get = |c: &RsfCertificate| if which == 0 { c.r1[(0, 0)] } else { c.r2[(0, 0)] };
        let with = |c: &RsfCertificate, v: f64| {
            let mut out = c.clone();
            if which == 0 {
                out.r1[(0, 0)] = v;
            } else {
                out.r2[(0, 0)] = v;
            }
            out
        };
        let centre = get(&best);
        let (mut lo, mut hi) = (centre - 10.0, centre + 10.0);
        for _ in 0..200 {
            let a = lo + (hi - lo) / 3.0;
            let b = hi - (hi - lo) / 3.0;
            if cost(&with(&best, a)) <= cost(&with(&best, b)) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let cand = with(&best, 0.5 * (lo + hi));
        if cost(&cand) < cost(&best) {
            best = cand;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub order: usize,
    pub lambda: f64,
    pub pole_targets: Option<Vec<Complex64>>,
    pub tol: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { order: 3, lambda: 1.7, pole_targets: None, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct Abstraction {
    pub m2: SystemModel,
    pub cert: RsfCertificate,
    pub hankel: Vec<f64>,
    pub lmis: LmiReport,
    pub equalities: EqualityReport,
}

/// Reduction plus certificate: balanced truncation for `A₂`, an exact
/// projection, pole placement, Lyapunov `M`, and matched abstract channels.
pub fn construct_abstraction(m1: &SystemModel, opts: &PipelineOptions) -> Result<Abstraction> {
    let red = balanced_truncate(m1, opts.order)?;
    let (p, _q2) = refine_projection(m1, &red.reduced.a, &red.p)?;
    let mut m2 = red.reduced.clone();
    m2.c = &m1.c * &p;
    m2.c_int = &m1.c_int * &p;
    m2.f = &m1.f * &p;
    let mut fixed = FixedGains::standard(m1, &m2)?;
    m2.e = Mat::zeros(opts.order, 1);
    if !m1.is_linear() {
        // E₁ = B₁β: the input interface cancels the nonlinearity, so H does
        // not depend on the slope
        let fit = least_squares(&m1.b, &m1.e)?;
        if fit.residual <= 1e-10 * m1.e.norm().max(1e-300) {
            fixed.l21 = -fit.x;
        } else {
            m2.e = least_squares(&p, &m1.e)?.x;
        }
    }
    let con = construct_certificate(m1, &m2, &p, opts.lambda, &fixed, opts.pole_targets.as_deref(), f64::INFINITY)?;
    let cert = con.cert;
    match_abstract_channels(&cert, m1, &mut m2)?;
    let lmis = verify_lmis(&cert, m1, &m2)?;
    let equalities = verify_equalities(&cert, m1, &m2, opts.tol)?;
    if !equalities.pass() {
        return Err(Error::EqualityResidual { tol: opts.tol, residuals: equalities.residuals });
    }
    Ok(Abstraction { m2, cert, hankel: red.hankel, lmis, equalities })
}

/// Joint simulation of a certified pair. `u2_policy` is called at the start
/// of every step and its value is held over the step; the interfaces are
/// evaluated continuously.
#[allow(clippy::too_many_arguments)]
pub fn simulate_pair(
    cert: &RsfCertificate,
    m1: &SystemModel,
    m2: &SystemModel,
    x1_0: &Vector,
    x2_0: &Vector,
    d1: &Signal,
    u2_policy: &mut dyn FnMut(usize, f64, &Vector) -> Result<Vector>,
    horizon: f64,
    dt: f64,
) -> Result<(Trace, Trace)> {
    cert.check(m1, m2)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let (n1, n2, q1, q2) = (m1.n(), m2.n(), m1.q(), m2.q());
    let steps = (horizon / dt).round() as usize;
    let mut t1 = Trace { dt, ..Default::default() };
    let mut t2 = Trace { dt, ..Default::default() };
    let mut z = Vector::zeros(n1 + n2);
    z.rows_mut(0, n1).copy_from(x1_0);
    z.rows_mut(n1, n2).copy_from(x2_0);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let x1 = z.rows(0, n1).into_owned();
        let x2 = z.rows(n1, n2).into_owned();
        let dk = d1.value(t, &x1);
        if dk.len() != m1.q() + m1.r() {
            return Err(Error::Dimension("disturbance signal width does not match m1".into()));
        }
        let u2 = u2_policy(k, t, &x2)?;
        let u1 = interface_u(cert, m1, &x1, &x2, &u2)?;
        let d2 = interface_d_raw(cert, m1, &x1, &x2, &dk);
        t1.t.push(t);
        t1.x.push(x1.clone());
        t1.y.push(m1.output(&x1));
        t1.u.push(u1);
        t1.v.push(dk.rows(0, q1).into_owned());
        t1.w.push(dk.rows(q1, m1.r()).into_owned());
        t2.t.push(t);
        t2.x.push(x2.clone());
        t2.y.push(m2.output(&x2));
        t2.u.push(u2.clone());
        t2.v.push(d2.rows(0, q2).into_owned());
        t2.w.push(d2.rows(q2, m2.r()).into_owned());
        if k == steps {
            break;
        }
        let f = |s: &Vector| -> Vector {
            let a = s.rows(0, n1).into_owned();
            let b = s.rows(n1, n2).into_owned();
            let u1 = interface_u_raw(cert, m1, &a, &b, &u2);
            let d2 = interface_d_raw(cert, m1, &a, &b, &dk);
            let da = m1.rhs(&a, &u1, &dk.rows(0, q1).into_owned(), &dk.rows(q1, m1.r()).into_owned());
            let db = m2.rhs(&b, &u2, &d2.rows(0, q2).into_owned(), &d2.rows(q2, m2.r()).into_owned());
            let mut out = Vector::zeros(n1 + n2);
            out.rows_mut(0, n1).copy_from(&da);
            out.rows_mut(n1, n2).copy_from(&db);
            out
        };
        z = rk4_step(f, &z, dt);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(t + dt));
        }
    }
    Ok((t1, t2))
}

fn stack(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RsfTraceReport {
    /// Sample times where `‖y₁ − y₂‖ > V + 1e-6`.
    pub error_bound_violations: Vec<f64>,
    /// Sample times where V grew although it dominated the gains.
    pub decay_violations: Vec<f64>,
    pub max_mismatch: f64,
    pub max_v: f64,
}

impl RsfTraceReport {
    pub fn clean(&self) -> bool {
        self.error_bound_violations.is_empty() && self.decay_violations.is_empty()
    }
}

pub fn check_rsf_conditions_along_trace(
    cert: &RsfCertificate,
    m1: &SystemModel,
    m2: &SystemModel,
    trace1: &Trace,
    trace2: &Trace,
) -> Result<RsfTraceReport> {
    if trace1.len() != trace2.len() {
        return Err(Error::InvalidArgument("traces are not synchronized".into()));
    }
    let (c1, c2) = gamma_coefficients(cert, m1, m2)?;
    let mut rep = RsfTraceReport::default();
    let vs: Vec<f64> = (0..trace1.len()).map(|k| eval_v(cert, &trace1.x[k], &trace2.x[k])).collect();
    for k in 0..trace1.len() {
        let mis = (&trace1.y[k] - &trace2.y[k]).norm();
        rep.max_mismatch = rep.max_mismatch.max(mis);
        rep.max_v = rep.max_v.max(vs[k]);
        if mis > vs[k] + 1e-6 {
            rep.error_bound_violations.push(trace1.t[k]);
        }
        if k + 1 < trace1.len() {
            let d1 = stack(&trace1.v[k], &trace1.w[k]);
            let gain = c1 * d1.norm() + c2 * trace2.u[k].norm();
            let rate = (vs[k + 1] - vs[k]) / trace1.dt;
            if gain <= vs[k] && rate > 1e-4 {
                rep.decay_violations.push(trace1.t[k]);
            }
        }
    }
    Ok(rep)
}

/// One sample of the derivative estimate used to prove the decay condition:
/// `V̇ ≤ −λV + ‖√M(...)‖ ≤ −λV + λ(c1‖d₁‖ + c2‖u₂‖)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChainSample {
    pub v: f64,
    pub vdot: f64,
    pub middle: f64,
    pub right: f64,
}

impl ChainSample {
    pub fn holds(&self, slack: f64) -> bool {
        self.vdot <= self.middle + slack && self.middle <= self.right + slack
    }
}

pub fn decay_chain(
    cert: &RsfCertificate,
    m1: &SystemModel,
    m2: &SystemModel,
    x1: &Vector,
    x2: &Vector,
    d1: &Vector,
    u2: &Vector,
) -> Result<ChainSample> {
    let (c1, c2) = gamma_coefficients(cert, m1, m2)?;
    let rm = cert.sqrt_m()?;
    let m = symmetrize(&cert.m);
    let u1 = interface_u(cert, m1, x1, x2, u2)?;
    let d2 = interface_d(cert, m1, x1, x2, d1)?;
    let (q1, q2) = (m1.q(), m2.q());
    let dx1 = m1.rhs(x1, &u1, &d1.rows(0, q1).into_owned(), &d1.rows(q1, m1.r()).into_owned());
    let dx2 = m2.rhs(x2, u2, &d2.rows(0, q2).into_owned(), &d2.rows(q2, m2.r()).into_owned());
    let e = x1 - &cert.p * x2;
    let v = eval_v(cert, x1, x2);
    let vdot = if v > 0.0 { e.dot(&(&m * (dx1 - &cert.p * dx2))) / v } else { 0.0 };
    let w = (m1.d() - &cert.p * m2.d() * &cert.r1) * d1 + (&m1.b * &cert.r2 - &cert.p * &m2.b) * u2;
    let middle = -cert.lambda * v + (&rm * w).norm();
    let right = -cert.lambda * v + cert.lambda * (c1 * d1.norm() + c2 * u2.norm());
    Ok(ChainSample { v, vdot, middle, right })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_model(a: f64) -> SystemModel {
        SystemModel::linear(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn identity_cert(n: usize, lambda: f64) -> RsfCertificate {
        RsfCertificate {
            m: Mat::identity(n, n),
            lambda,
            p: Mat::identity(n, n),
            k1: Mat::zeros(1, n),
            k2: Mat::zeros(1, n),
            q1: Mat::zeros(1, n),
            q2: Mat::zeros(1, n),
            r1: Mat::identity(1, 1),
            r2: Mat::identity(1, 1),
            l11: Mat::zeros(1, 1),
            l12: Mat::zeros(1, 1),
            l21: Mat::zeros(1, 1),
            l22: Mat::zeros(1, 1),
            delta_bar: 0.0,
        }
    }

    #[test]
    fn h_reduces_to_a() {
        let m = scalar_model(-2.0);
        let c = identity_cert(1, 0.5);
        assert_eq!(build_h(&c, &m, &m).unwrap(), m.a);
    }

    #[test]
    fn h_ignores_nonlinearity_at_zero_slope() {
        let mut m = scalar_model(-2.0);
        m.e = Mat::from_element(1, 1, 3.0);
        m.f = Mat::from_element(1, 1, 1.0);
        let c = identity_cert(1, 0.5);
        assert_eq!(build_h_at(&c, &m, &m, 0.0).unwrap(), m.a);
        assert_eq!(build_h_at(&c, &m, &m, 1.0).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn identity_abstraction() {
        let m = scalar_model(-1.0);
        let c = identity_cert(1, 0.5);
        let eq = verify_equalities(&c, &m, &m, 1e-12).unwrap();
        assert!(eq.pass());
        let l = verify_lmis(&c, &m, &m).unwrap();
        assert!(l.lmi_a_margin >= 0.0 && l.lmi_b_margin > 0.0);
        let (c1, c2) = gamma_coefficients(&c, &m, &m).unwrap();
        assert_eq!((c1, c2), (0.0, 0.0));
        let mut zero_m = c.clone();
        zero_m.m = Mat::zeros(1, 1);
        assert!(verify_lmis(&zero_m, &m, &m).unwrap().lmi_a_margin < 0.0);
    }

    #[test]
    fn perturbed_projection_shows_in_residual() {
        let m = scalar_model(-1.0);
        let mut c = identity_cert(1, 0.5);
        c.p[(0, 0)] += 1.0;
        let eq = verify_equalities(&c, &m, &m, 0.05).unwrap();
        assert_abs_diff_eq!(eq.residuals[0], 1.0, epsilon = 1e-12);
        assert!(!eq.pass());
    }

    #[test]
    fn interfaces() {
        let m = scalar_model(-1.0);
        let mut c = identity_cert(1, 0.5);
        c.q2 = Mat::from_element(1, 1, 0.7);
        let x = Vector::from_element(1, 2.0);
        let u = interface_u(&c, &m, &x, &x, &Vector::zeros(1)).unwrap();
        assert_abs_diff_eq!(u[0], 1.4);
        let z = Vector::zeros(1);
        assert_abs_diff_eq!(interface_u(&c, &m, &z, &z, &Vector::from_element(1, 0.5)).unwrap()[0], 0.5);
        let d = interface_d(&c, &m, &x, &z, &Vector::from_element(1, 0.3)).unwrap();
        assert_abs_diff_eq!(d[0], 0.3);
        assert!(interface_u(&c, &m, &Vector::zeros(2), &z, &z).is_err());
    }

    #[test]
    fn nonlinear_disturbance_interface() {
        let mut m = scalar_model(-1.0);
        m.phi = crate::models::SlopeNonlinearity::saturation(1.0, 0.0, 0.5454);
        m.f = Mat::from_element(1, 1, 1.0);
        let mut c = identity_cert(1, 0.5);
        c.l12 = Mat::from_element(1, 1, 0.0285);
        let d1 = Vector::from_element(1, 1.0);
        let z = Vector::zeros(1);
        assert_abs_diff_eq!(interface_d(&c, &m, &z, &z, &d1).unwrap()[0], 1.0);
        let x2 = Vector::from_element(1, 0.2);
        let d = interface_d(&c, &m, &x2, &x2, &d1).unwrap();
        assert_abs_diff_eq!(d[0], 1.0 - 0.0285 * 0.2, epsilon = 1e-12);
    }

    #[test]
    fn v_and_epsilon() {
        let m = scalar_model(-1.0);
        let c = identity_cert(1, 0.5);
        let x = Vector::from_element(1, 1.5);
        assert_eq!(eval_v(&c, &x, &x), 0.0);
        let q = EpsilonQuery { d_max: 0.0, u2_max: 0.0, x1_0: Some(vec![1.5]), x2_0: Some(vec![1.5]) };
        assert_eq!(epsilon_bound(&c, &m, &m, &q).unwrap(), 0.0);
        let q = EpsilonQuery { d_max: 0.0, u2_max: 0.0, x1_0: Some(vec![2.0]), x2_0: Some(vec![1.0]) };
        assert_abs_diff_eq!(epsilon_bound(&c, &m, &m, &q).unwrap(), 1.0);
    }

    #[test]
    fn scaling_m_scales_v_and_gains() {
        let m1 = scalar_model(-1.0);
        let mut m2 = scalar_model(-1.0);
        m2.b = Mat::from_element(1, 1, 0.5);
        m2.g = Mat::from_element(1, 1, 0.2);
        let c = identity_cert(1, 0.5);
        let mut s = c.clone();
        s.m *= 4.0;
        let (a, b) = gamma_coefficients(&c, &m1, &m2).unwrap();
        let (a4, b4) = gamma_coefficients(&s, &m1, &m2).unwrap();
        assert_abs_diff_eq!(a4, 2.0 * a, epsilon = 1e-12);
        assert_abs_diff_eq!(b4, 2.0 * b, epsilon = 1e-12);
        let x1 = Vector::from_element(1, 0.3);
        let x2 = Vector::from_element(1, -0.1);
        assert_abs_diff_eq!(eval_v(&s, &x1, &x2), 2.0 * eval_v(&c, &x1, &x2), epsilon = 1e-12);
        let l = verify_lmis(&c, &m1, &m2).unwrap();
        let ls = verify_lmis(&s, &m1, &m2).unwrap();
        assert_eq!(l.lmi_b_margin >= 0.0, ls.lmi_b_margin >= 0.0);
    }

    #[test]
    fn scalar_construction() {
        let m = scalar_model(-1.0);
        let fixed = FixedGains::standard(&m, &m).unwrap();
        let p = Mat::identity(1, 1);
        let pole = [Complex64::new(-3.0, 0.0)];
        let con = construct_certificate(&m, &m, &p, 0.5, &fixed, Some(&pole), 1e-9).unwrap();
        assert_abs_diff_eq!(con.cert.k2[(0, 0)], -2.0, epsilon = 1e-9);
        assert!(con.cert.m[(0, 0)] >= 1.0);
        assert!(con.lmis.pass());
        let bad = [Complex64::new(-0.2, 0.0)];
        assert!(matches!(
            construct_certificate(&m, &m, &p, 0.5, &fixed, Some(&bad), 1e-9),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn matched_channels_zero_gains() {
        let m1 = scalar_model(-1.0);
        let mut m2 = scalar_model(-1.0);
        m2.b = Mat::from_element(1, 1, 0.1);
        m2.g = Mat::from_element(1, 1, -3.0);
        let c = identity_cert(1, 0.5);
        assert!(gamma_coefficients(&c, &m1, &m2).unwrap().0 > 0.0);
        let (b, d) = match_abstract_channels(&c, &m1, &mut m2).unwrap();
        assert!(b && d);
        let (c1, c2) = gamma_coefficients(&c, &m1, &m2).unwrap();
        assert!(c1 < 1e-12 && c2 < 1e-12);
    }

    #[test]
    fn gain_search_finds_matching_scale() {
        let m1 = scalar_model(-1.0);
        let mut m2 = scalar_model(-1.0);
        m2.g = Mat::from_element(1, 1, 2.0);
        let c = identity_cert(1, 0.5);
        let best = optimize_gains(&c, &m1, &m2, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(best.r1[(0, 0)], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn corrupted_m_breaks_error_bound() {
        let m = scalar_model(-1.0);
        let mut c = identity_cert(1, 0.5);
        c.m *= 1e-3;
        let mut pol = |_k: usize, _t: f64, _x: &Vector| Ok(Vector::zeros(1));
        let (t1, t2) = simulate_pair(&c, &m, &m, &Vector::from_element(1, 1.0), &Vector::zeros(1), &Signal::zeros(1), &mut pol, 1.0, 0.01).unwrap();
        let rep = check_rsf_conditions_along_trace(&c, &m, &m, &t1, &t2).unwrap();
        assert!(!rep.error_bound_violations.is_empty());
        let good = identity_cert(1, 0.5);
        let (t1, t2) = simulate_pair(&good, &m, &m, &Vector::from_element(1, 1.0), &Vector::zeros(1), &Signal::zeros(1), &mut pol, 1.0, 0.01).unwrap();
        assert!(check_rsf_conditions_along_trace(&good, &m, &m, &t1, &t2).unwrap().clean());
    }

    #[test]
    fn json_round_trip() {
        let c = identity_cert(2, 1.7);
        let back = RsfCertificate::from_json_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}

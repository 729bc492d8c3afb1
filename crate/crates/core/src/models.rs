//! Subsystem models, the storage saturation, interconnection and fixed-step
//! simulation.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearityKind {
    Saturation,
    Identity,
    Zero,
}

/// Scalar nonlinearity with slope restriction `a <= (φ(s)-φ(t))/(s-t) <= b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeNonlinearity {
    pub kind: NonlinearityKind,
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub sat_min: f64,
    #[serde(default)]
    pub sat_max: f64,
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

impl SlopeNonlinearity {
    pub fn zero() -> Self {
        SlopeNonlinearity {
            kind: NonlinearityKind::Zero,
            a: 0.0,
            b: 0.0,
            sat_min: 0.0,
            sat_max: 0.0,
            gain: 0.0,
        }
    }

    pub fn saturation(gain: f64, sat_min: f64, sat_max: f64) -> Self {
        SlopeNonlinearity {
            kind: NonlinearityKind::Saturation,
            a: 0.0,
            b: gain,
            sat_min,
            sat_max,
            gain,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Saturation => (self.gain * s).clamp(self.sat_min, self.sat_max),
            NonlinearityKind::Identity => self.gain * s,
            NonlinearityKind::Zero => 0.0,
        }
    }

    /// Secant slope between two arguments; the upper slope `b` when they
    /// coincide.
    pub fn secant(&self, s1: f64, s2: f64) -> f64 {
        if (s1 - s2).abs() < 1e-12 {
            self.b
        } else {
            (self.eval(s1) - self.eval(s2)) / (s1 - s2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a <= self.b) {
            return Err(Error::InvalidModel(format!(
                "phi: slope bounds a = {} > b = {}",
                self.a, self.b
            )));
        }
        if self.kind == NonlinearityKind::Saturation {
            if self.sat_min > self.sat_max {
                return Err(Error::InvalidModel("phi: sat_min > sat_max".into()));
            }
            if self.a != 0.0 || (self.b - self.gain).abs() > 1e-12 {
                return Err(Error::InvalidModel(
                    "phi: saturation needs a = 0 and b = gain".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Storage response to a frequency deviation, clamped to the device limits.
pub fn ess_response(delta_f: f64, params: &SlopeNonlinearity) -> Result<f64> {
    if params.kind != NonlinearityKind::Saturation {
        return Err(Error::InvalidArgument(
            "ess_response needs a saturation nonlinearity".into(),
        ));
    }
    Ok(params.eval(delta_f))
}

/// `ẋ = Ax + Bu + Gv + Sw + Eφ(Fx)`, `y = Cx`, internal output `C_int x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub g: Mat,
    pub s_int: Mat,
    pub e: Mat,
    pub f: Mat,
    pub phi: SlopeNonlinearity,
    pub c_int: Mat,
}

impl SystemModel {
    /// Linear model without internal channels.
    pub fn linear(a: Mat, b: Mat, c: Mat, g: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = SystemModel {
            c_int: c.clone(),
            a,
            b,
            c,
            g,
            s_int: Mat::zeros(n, 0),
            e: Mat::zeros(n, 1),
            f: Mat::zeros(1, n),
            phi: SlopeNonlinearity::zero(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn p(&self) -> usize {
        self.b.ncols()
    }
    pub fn q(&self) -> usize {
        self.g.ncols()
    }
    pub fn r(&self) -> usize {
        self.s_int.ncols()
    }
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// `D = [G S]`.
    pub fn d(&self) -> Mat {
        let n = self.n();
        let mut d = Mat::zeros(n, self.q() + self.r());
        d.columns_mut(0, self.q()).copy_from(&self.g);
        d.columns_mut(self.q(), self.r()).copy_from(&self.s_int);
        d
    }

    /// Replaces `[G S]` by the columns of `d`.
    pub fn set_d(&mut self, d: &Mat) -> Result<()> {
        if d.shape() != (self.n(), self.q() + self.r()) {
            return Err(Error::Dimension(format!(
                "set_d: got {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                self.n(),
                self.q() + self.r()
            )));
        }
        self.g = d.columns(0, self.q()).into_owned();
        self.s_int = d.columns(self.q(), self.r()).into_owned();
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.phi.kind == NonlinearityKind::Zero || self.e.iter().all(|v| *v == 0.0)
    }

    /// Same model with the internal channels removed.
    pub fn without_internal(&self) -> SystemModel {
        let mut m = self.clone();
        m.s_int = Mat::zeros(self.n(), 0);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let check = |name: &str, m: &Mat, rows: usize, cols: Option<usize>| -> Result<()> {
            if m.nrows() != rows || cols.is_some_and(|c| m.ncols() != c) {
                return Err(Error::InvalidModel(format!(
                    "{name} is {}x{}, expected {rows}x{}",
                    m.nrows(),
                    m.ncols(),
                    cols.map(|c| c.to_string()).unwrap_or_else(|| "_".into())
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        check("A", &self.a, n, Some(n))?;
        check("B", &self.b, n, None)?;
        check("C", &self.c, self.c.nrows(), Some(n))?;
        check("G", &self.g, n, None)?;
        check("S", &self.s_int, n, None)?;
        check("E", &self.e, n, Some(1))?;
        check("F", &self.f, 1, Some(n))?;
        check("C_int", &self.c_int, self.c_int.nrows(), Some(n))?;
        self.phi.validate()
    }

    pub fn output(&self, x: &Vector) -> Vector {
        &self.c * x
    }

    pub fn nonlinear_term(&self, x: &Vector) -> f64 {
        if self.phi.kind == NonlinearityKind::Zero {
            return 0.0;
        }
        self.phi.eval((&self.f * x)[0])
    }

    pub fn eval_dynamics(&self, x: &Vector, u: &Vector, v: &Vector, w: &Vector) -> Result<Vector> {
        if x.len() != self.n() || u.len() != self.p() || v.len() != self.q() || w.len() != self.r() {
            return Err(Error::Dimension(format!(
                "eval_dynamics: x{} u{} v{} w{} for model n{} p{} q{} r{}",
                x.len(),
                u.len(),
                v.len(),
                w.len(),
                self.n(),
                self.p(),
                self.q(),
                self.r()
            )));
        }
        Ok(self.rhs(x, u, v, w))
    }

    /// Unchecked right-hand side.
    pub fn rhs(&self, x: &Vector, u: &Vector, v: &Vector, w: &Vector) -> Vector {
        let mut dx = &self.a * x + &self.b * u + &self.g * v + &self.s_int * w;
        let nl = self.nonlinear_term(x);
        if nl != 0.0 {
            dx += self.e.column(0) * nl;
        }
        dx
    }
}

/// Exogenous signal, sampled at the start of each integration step.
#[derive(Clone)]
pub enum Signal {
    Constant(Vector),
    Step { time: f64, before: Vector, after: Vector },
    Ramp { start: f64, base: Vector, slope: Vector },
    Func(Arc<dyn Fn(f64, &Vector) -> Vector + Send + Sync>),
}

impl std::fmt::Debug for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Signal::Constant(v) => write!(f, "Constant({:?})", v.as_slice()),
            Signal::Step { time, .. } => write!(f, "Step(t={time})"),
            Signal::Ramp { start, .. } => write!(f, "Ramp(t={start})"),
            Signal::Func(_) => write!(f, "Func"),
        }
    }
}

impl Signal {
    pub fn zeros(k: usize) -> Self {
        Signal::Constant(Vector::zeros(k))
    }

    pub fn constant(v: &[f64]) -> Self {
        Signal::Constant(Vector::from_row_slice(v))
    }

    pub fn value(&self, t: f64, x: &Vector) -> Vector {
        match self {
            Signal::Constant(v) => v.clone(),
            Signal::Step { time, before, after } => {
                if t >= *time {
                    after.clone()
                } else {
                    before.clone()
                }
            }
            Signal::Ramp { start, base, slope } => base + slope * (t - start).max(0.0),
            Signal::Func(f) => f(t, x),
        }
    }
}

/// Uniformly sampled simulation record. Sample `k` is at `t = k·dt`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub y: Vec<Vector>,
    pub u: Vec<Vector>,
    pub v: Vec<Vector>,
    pub w: Vec<Vector>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn output_channel(&self, k: usize) -> Result<Vec<f64>> {
        self.y
            .iter()
            .map(|y| y.get(k).copied().ok_or_else(|| Error::MissingChannel(format!("y{}", k + 1))))
            .collect()
    }

    pub fn input_channel(&self, k: usize) -> Result<Vec<f64>> {
        self.u
            .iter()
            .map(|u| u.get(k).copied().ok_or_else(|| Error::MissingChannel(format!("u{}", k + 1))))
            .collect()
    }

    fn widths(&self) -> [usize; 5] {
        let w = |v: &Vec<Vector>| v.first().map(|r| r.len()).unwrap_or(0);
        [w(&self.x), w(&self.y), w(&self.u), w(&self.v), w(&self.w)]
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for (name, k) in ["x", "y", "u", "v", "w"].iter().zip(self.widths()) {
            h.extend((1..=k).map(|i| format!("{name}{i}")));
        }
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(self.header())?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:e}", self.t[k])];
            for col in [&self.x, &self.y, &self.u, &self.v, &self.w] {
                row.extend(col[k].iter().map(|v| format!("{v:e}")));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Trace> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header.first().map(|s| s.as_str()) != Some("t") {
            return Err(Error::parse("trace", "first column must be t"));
        }
        let mut groups: Vec<(char, Vec<usize>)> = "xyuvw".chars().map(|c| (c, Vec::new())).collect();
        for (i, h) in header.iter().enumerate().skip(1) {
            let c = h.chars().next().unwrap_or(' ');
            match groups.iter_mut().find(|(g, _)| *g == c) {
                Some((_, cols)) => cols.push(i),
                None => return Err(Error::parse("trace", format!("unknown column {h}"))),
            }
        }
        let mut tr = Trace::default();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let val = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::parse("trace", format!("row {} is short", line + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(format!("trace row {}", line + 2), e))
            };
            tr.t.push(val(0)?);
            let mut vecs = Vec::new();
            for (_, cols) in &groups {
                let vals: Result<Vec<f64>> = cols.iter().map(|&i| val(i)).collect();
                vecs.push(Vector::from_vec(vals?));
            }
            tr.w.push(vecs.pop().unwrap());
            tr.v.push(vecs.pop().unwrap());
            tr.u.push(vecs.pop().unwrap());
            tr.y.push(vecs.pop().unwrap());
            tr.x.push(vecs.pop().unwrap());
        }
        if tr.t.len() >= 2 {
            tr.dt = tr.t[1] - tr.t[0];
            if tr.dt <= 0.0 {
                return Err(Error::parse("trace", "time column must increase"));
            }
        }
        Ok(tr)
    }

    pub fn load_csv(path: &Path) -> Result<Trace> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// One classical RK4 step.
pub fn rk4_step(f: impl Fn(&Vector) -> Vector, x: &Vector, h: f64) -> Vector {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Fixed-step RK4 with signals held constant over each step.
pub fn simulate(
    model: &SystemModel,
    x0: &Vector,
    u: &Signal,
    v: &Signal,
    w: &Signal,
    horizon: f64,
    dt: f64,
) -> Result<Trace> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "simulate: need dt > 0 and horizon >= 0 (dt = {dt}, horizon = {horizon})"
        )));
    }
    if x0.len() != model.n() {
        return Err(Error::Dimension(format!(
            "simulate: x0 has {} entries, model has {} states",
            x0.len(),
            model.n()
        )));
    }
    let steps = (horizon / dt).round() as usize;
    let mut tr = Trace {
        dt,
        ..Default::default()
    };
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (uk, vk, wk) = (u.value(t, &x), v.value(t, &x), w.value(t, &x));
        if k == 0 {
            model.eval_dynamics(&x, &uk, &vk, &wk)?;
        }
        tr.t.push(t);
        tr.y.push(model.output(&x));
        tr.x.push(x.clone());
        tr.u.push(uk.clone());
        tr.v.push(vk.clone());
        tr.w.push(wk.clone());
        if k == steps {
            break;
        }
        x = rk4_step(|z| model.rhs(z, &uk, &vk, &wk), &x, dt);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(t + dt));
        }
    }
    Ok(tr)
}

/// Tie-line summand `Σ_j T_ij (f_i − f_j)`.
pub fn coupling_disturbance(f_local: f64, f_neighbors: &[f64], t_row: &[f64]) -> Result<f64> {
    if f_neighbors.len() != t_row.len() {
        return Err(Error::Dimension(format!(
            "coupling_disturbance: {} neighbors, {} constants",
            f_neighbors.len(),
            t_row.len()
        )));
    }
    Ok(f_neighbors
        .iter()
        .zip(t_row)
        .map(|(fj, t)| t * (f_local - fj))
        .sum())
}

/// Network of subsystems closed through `w = 𝓜 y_int`.
#[derive(Debug, Clone)]
pub struct Interconnection {
    pub subsystems: Vec<SystemModel>,
    pub coupling: Mat,
    pub t: Mat,
}

fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

impl Interconnection {
    pub fn validate(&self) -> Result<()> {
        let r: usize = self.subsystems.iter().map(|s| s.r()).sum();
        let m: usize = self.subsystems.iter().map(|s| s.c_int.nrows()).sum();
        if self.coupling.shape() != (r, m) {
            return Err(Error::Dimension(format!(
                "coupling is {}x{}, expected {r}x{m}",
                self.coupling.nrows(),
                self.coupling.ncols()
            )));
        }
        let k = self.subsystems.len();
        if self.t.len() > 0 {
            if self.t.shape() != (k, k) {
                return Err(Error::Dimension("T must be square over subsystems".into()));
            }
            if (0..k).any(|i| self.t[(i, i)] != 0.0) {
                return Err(Error::InvalidModel("T_ii must be zero".into()));
            }
        }
        Ok(())
    }

    /// Monolithic model with the internal channels closed.
    pub fn interconnect(&self) -> Result<SystemModel> {
        self.validate()?;
        let subs = &self.subsystems;
        let nonlinear: Vec<usize> = (0..subs.len()).filter(|&i| !subs[i].is_linear()).collect();
        if nonlinear.len() > 1 {
            return Err(Error::InvalidModel(
                "interconnect supports at most one nonlinear subsystem".into(),
            ));
        }
        let pick = |f: fn(&SystemModel) -> &Mat| -> Vec<&Mat> { subs.iter().map(f).collect() };
        let a = block_diag(&pick(|s| &s.a));
        let s = block_diag(&pick(|s| &s.s_int));
        let ci = block_diag(&pick(|s| &s.c_int));
        let n = a.nrows();
        let mut e = Mat::zeros(n, 1);
        let mut f = Mat::zeros(1, n);
        let mut phi = SlopeNonlinearity::zero();
        let mut off = 0;
        for (i, sub) in subs.iter().enumerate() {
            if nonlinear.contains(&i) {
                e.view_mut((off, 0), (sub.n(), 1)).copy_from(&sub.e);
                f.view_mut((0, off), (1, sub.n())).copy_from(&sub.f);
                phi = sub.phi;
            }
            off += sub.n();
        }
        let out = SystemModel {
            a: a + &s * &self.coupling * &ci,
            b: block_diag(&pick(|s| &s.b)),
            c: block_diag(&pick(|s| &s.c)),
            g: block_diag(&pick(|s| &s.g)),
            s_int: Mat::zeros(n, 0),
            e,
            f,
            phi,
            c_int: ci,
        };
        out.validate()?;
        Ok(out)
    }
}

// ----- JSON ---------------------------------------------------------------

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModelFile {
    n: usize,
    p: usize,
    q: usize,
    #[serde(default)]
    r: usize,
    A: Rows,
    B: Rows,
    C: Rows,
    #[serde(default)]
    G: Rows,
    #[serde(default)]
    S: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    E: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    F: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<SlopeNonlinearity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    C_int: Option<Rows>,
}

#[derive(Debug, Deserialize)]
#[allow(non_snake_case)]
struct NetworkFile {
    subsystems: Vec<String>,
    coupling: Rows,
    #[serde(default)]
    T: Rows,
}

pub fn mat_from_rows(rows: &Rows, nrows: usize, ncols: usize, field: &str) -> Result<Mat> {
    let empty_ok = (ncols == 0 && (rows.is_empty() || (rows.len() == nrows && rows.iter().all(|r| r.is_empty()))))
        || (nrows == 0 && rows.is_empty());
    if empty_ok {
        return Ok(Mat::zeros(nrows, ncols));
    }
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!(
            "{field}: expected {nrows}x{ncols}, got {}x{}",
            rows.len(),
            rows.first().map(|r| r.len()).unwrap_or(0)
        )));
    }
    Ok(Mat::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Matrix with dimensions taken from the data itself.
pub fn mat_any(rows: &Rows, field: &str) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    mat_from_rows(rows, r, c, field)
}

pub fn rows_of(m: &Mat) -> Rows {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

impl SystemModel {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("model line {}", e.line()), e))?;
        Self::from_file(f)
    }

    fn from_file(f: ModelFile) -> Result<Self> {
        let a = mat_from_rows(&f.A, f.n, f.n, "A")?;
        let b = mat_from_rows(&f.B, f.n, f.p, "B")?;
        let m = f.C.len();
        let c = mat_from_rows(&f.C, m, f.n, "C")?;
        let g = mat_from_rows(&f.G, f.n, f.q, "G")?;
        let s = mat_from_rows(&f.S, f.n, f.r, "S")?;
        let e = match &f.E {
            Some(rows) => mat_from_rows(rows, f.n, 1, "E")?,
            None => Mat::zeros(f.n, 1),
        };
        let fm = match &f.F {
            Some(rows) => mat_from_rows(rows, 1, f.n, "F")?,
            None => Mat::zeros(1, f.n),
        };
        let c_int = match &f.C_int {
            Some(rows) => mat_from_rows(rows, rows.len(), f.n, "C_int")?,
            None => c.clone(),
        };
        let model = SystemModel {
            a,
            b,
            c,
            g,
            s_int: s,
            e,
            f: fm,
            phi: f.phi.unwrap_or_else(SlopeNonlinearity::zero),
            c_int,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let f = ModelFile {
            n: self.n(),
            p: self.p(),
            q: self.q(),
            r: self.r(),
            A: rows_of(&self.a),
            B: rows_of(&self.b),
            C: rows_of(&self.c),
            G: rows_of(&self.g),
            S: rows_of(&self.s_int),
            E: Some(rows_of(&self.e)),
            F: Some(rows_of(&self.f)),
            phi: Some(self.phi),
            C_int: if self.c_int == self.c { None } else { Some(rows_of(&self.c_int)) },
        };
        serde_json::to_string_pretty(&f).expect("model serializes")
    }
}

#[derive(Debug, Clone)]
pub enum LoadedModel {
    Model(SystemModel),
    Network(Interconnection),
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{} line {}", path.display(), e.line()), e))?;
    if value.get("subsystems").is_some() {
        let nf: NetworkFile = serde_json::from_value(value)
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut subs = Vec::new();
        for p in &nf.subsystems {
            match load_model(&base.join(p))? {
                LoadedModel::Model(m) => subs.push(m),
                LoadedModel::Network(_) => {
                    return Err(Error::InvalidModel(format!("{p}: nested networks are not supported")))
                }
            }
        }
        let r: usize = subs.iter().map(|s| s.r()).sum();
        let m: usize = subs.iter().map(|s| s.c_int.nrows()).sum();
        let net = Interconnection {
            coupling: mat_from_rows(&nf.coupling, r, m, "coupling")?,
            t: if nf.T.is_empty() {
                Mat::zeros(0, 0)
            } else {
                mat_from_rows(&nf.T, subs.len(), subs.len(), "T")?
            },
            subsystems: subs,
        };
        net.validate()?;
        Ok(LoadedModel::Network(net))
    } else {
        let f: ModelFile = serde_json::from_value(value)
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(LoadedModel::Model(SystemModel::from_file(f)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(a: f64) -> SystemModel {
        SystemModel::linear(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::zeros(1, 0),
        )
        .unwrap()
    }

    fn ess() -> SlopeNonlinearity {
        SlopeNonlinearity::saturation(1.0, 0.0, 0.5454)
    }

    #[test]
    fn zero_model_has_zero_derivative() {
        let mut m = SystemModel::linear(Mat::zeros(2, 2), Mat::zeros(2, 1), Mat::zeros(1, 2), Mat::zeros(2, 1)).unwrap();
        m.phi = ess();
        let dx = m
            .eval_dynamics(&Vector::from_element(2, 3.0), &Vector::from_element(1, 1.0), &Vector::from_element(1, 1.0), &Vector::zeros(0))
            .unwrap();
        assert_eq!(dx, Vector::zeros(2));
    }

    #[test]
    fn eval_dynamics_rejects_bad_dims() {
        let m = scalar(-1.0);
        assert!(m.eval_dynamics(&Vector::zeros(2), &Vector::zeros(1), &Vector::zeros(0), &Vector::zeros(0)).is_err());
    }

    #[test]
    fn ess_limits() {
        assert_abs_diff_eq!(ess_response(0.1, &ess()).unwrap(), 0.1);
        assert_abs_diff_eq!(ess_response(10.0, &ess()).unwrap(), 0.5454);
        assert_abs_diff_eq!(ess_response(-10.0, &ess()).unwrap(), 0.0);
        assert!(ess_response(0.1, &SlopeNonlinearity::zero()).is_err());
    }

    proptest! {
        #[test]
        fn ess_slope_restricted(s in -3.0f64..3.0, t in -3.0f64..3.0) {
            let p = SlopeNonlinearity::saturation(2.0, 0.0, 0.5454);
            prop_assert!(p.eval(s.max(t)) >= p.eval(s.min(t)));
            prop_assert!((p.eval(s) - p.eval(t)).abs() <= 2.0 * (s - t).abs() + 1e-12);
            if (s - t).abs() > 1e-9 {
                let d = p.secant(s, t);
                prop_assert!(d >= p.a - 1e-12 && d <= p.b + 1e-12);
            }
        }
    }

    #[test]
    fn scalar_decay() {
        let tr = simulate(&scalar(-1.0), &Vector::from_element(1, 1.0), &Signal::zeros(1), &Signal::zeros(0), &Signal::zeros(0), 1.0, 0.005).unwrap();
        assert_abs_diff_eq!(tr.x.last().unwrap()[0], (-1.0f64).exp(), epsilon = 1e-9);
        assert_eq!(tr.len(), 201);
    }

    #[test]
    fn rk4_fourth_order() {
        let err = |dt: f64| {
            let tr = simulate(&scalar(-1.0), &Vector::from_element(1, 1.0), &Signal::zeros(1), &Signal::zeros(0), &Signal::zeros(0), 1.0, dt).unwrap();
            (tr.x.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn equilibrium_stays_zero() {
        let tr = simulate(&scalar(-2.0), &Vector::zeros(1), &Signal::zeros(1), &Signal::zeros(0), &Signal::zeros(0), 2.0, 0.01).unwrap();
        assert!(tr.x.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let r = simulate(&scalar(2000.0), &Vector::from_element(1, 1.0), &Signal::zeros(1), &Signal::zeros(0), &Signal::zeros(0), 10.0, 0.1);
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn superposition() {
        let a = Mat::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -0.5]);
        let m = SystemModel::linear(a, Mat::from_row_slice(2, 1, &[0.0, 1.0]), Mat::from_row_slice(1, 2, &[1.0, 0.0]), Mat::from_row_slice(2, 1, &[1.0, 0.0])).unwrap();
        let run = |x0: [f64; 2], u: f64, v: f64| {
            simulate(&m, &Vector::from_row_slice(&x0), &Signal::constant(&[u]), &Signal::constant(&[v]), &Signal::zeros(0), 3.0, 0.01).unwrap()
        };
        let t1 = run([1.0, 0.0], 0.5, 0.0);
        let t2 = run([0.0, -1.0], 0.0, 1.0);
        let t12 = run([1.0, -1.0], 0.5, 1.0);
        for k in 0..t12.len() {
            assert!((&t12.x[k] - &t1.x[k] - &t2.x[k]).norm() < 1e-6);
        }
    }

    #[test]
    fn coupling_examples() {
        assert_eq!(coupling_disturbance(50.0, &[50.0, 50.0], &[0.3, 0.4]).unwrap(), 0.0);
        assert_abs_diff_eq!(coupling_disturbance(50.1, &[50.0], &[0.5]).unwrap(), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(coupling_disturbance(0.0, &[0.2, -0.2], &[0.7, 0.7]).unwrap(), 0.0, epsilon = 1e-12);
        assert!(coupling_disturbance(0.0, &[0.2], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn interconnect_identity_and_block_diagonal() {
        let one = Interconnection { subsystems: vec![scalar(-1.0)], coupling: Mat::zeros(0, 1), t: Mat::zeros(0, 0) };
        assert_eq!(one.interconnect().unwrap().a, scalar(-1.0).a);
        let two = Interconnection { subsystems: vec![scalar(-1.0), scalar(-3.0)], coupling: Mat::zeros(0, 2), t: Mat::zeros(0, 0) };
        let m = two.interconnect().unwrap();
        assert_eq!(m.a, Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -3.0]));
    }

    #[test]
    fn decoupled_network_matches_standalone_runs() {
        let two = Interconnection { subsystems: vec![scalar(-1.0), scalar(-3.0)], coupling: Mat::zeros(0, 2), t: Mat::zeros(0, 0) };
        let m = two.interconnect().unwrap();
        let tr = simulate(&m, &Vector::from_row_slice(&[1.0, 2.0]), &Signal::constant(&[0.3, -0.2]), &Signal::zeros(0), &Signal::zeros(0), 2.0, 0.01).unwrap();
        for (i, (a, x0, u)) in [(-1.0, 1.0, 0.3), (-3.0, 2.0, -0.2)].into_iter().enumerate() {
            let s = simulate(&scalar(a), &Vector::from_element(1, x0), &Signal::constant(&[u]), &Signal::zeros(0), &Signal::zeros(0), 2.0, 0.01).unwrap();
            for k in 0..s.len() {
                assert!((s.x[k][0] - tr.x[k][i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn json_round_trip_and_invariants() {
        let mut m = scalar(-1.0);
        m.phi = ess();
        m.e = Mat::from_element(1, 1, 0.1);
        m.f = Mat::from_element(1, 1, 2.0);
        let back = SystemModel::from_json_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"n":2,"p":1,"q":0,"A":[[1,2,3],[4,5,6]],"B":[[1],[0]],"C":[[1,0]]}"#;
        assert!(matches!(SystemModel::from_json_str(bad), Err(Error::InvalidModel(_))));
        assert!(matches!(SystemModel::from_json_str("{"), Err(Error::Parse { .. })));
    }

    #[test]
    fn trace_csv_round_trip() {
        let tr = simulate(&scalar(-1.0), &Vector::from_element(1, 1.0), &Signal::constant(&[0.25]), &Signal::zeros(0), &Signal::zeros(0), 0.1, 0.01).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,y1,u1\n"));
        let back = Trace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.x, tr.x);
        assert_eq!(back.u, tr.u);
        assert_abs_diff_eq!(back.dt, 0.01, epsilon = 1e-15);
    }
}

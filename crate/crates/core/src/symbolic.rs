//! Grid abstraction of a reduced model and recurrence synthesis on it.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Signal, SystemModel, Trace};
use crate::numerics::{expm, Mat, Vector};
use crate::rsf::{simulate_pair, RsfCertificate};
use crate::specs::{monitor, FreqSpec, Interval, MonitorContext, Verdict};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthBound {
    /// Entrywise `|e^{At}|` bound, linear abstractions only.
    #[default]
    Exact,
    /// `ṙ = Λr + ρ` with the Metzler matrix `Λ`.
    Metzler,
}

/// Grid parameters as stored in JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eta: Vec<f64>,
    pub tau: f64,
    pub u_step: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(default)]
    pub disturbance: Option<Vec<Interval>>,
    #[serde(default)]
    pub growth: GrowthBound,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

fn default_substeps() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAbstraction {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eta: Vec<f64>,
    pub input_values: Vec<Vec<f64>>,
    pub tau: f64,
    pub disturbance_box: Vec<Interval>,
    pub substeps: usize,
    pub growth: GrowthBound,
    pub delta_bar: f64,
    /// Output band the sampled flow must respect between sampling instants.
    pub output_band: Option<Interval>,
}

/// `{−u_max, …, 0, …, u_max}` in steps of `step`.
pub fn uniform_inputs(u_max: f64, step: f64) -> Result<Vec<Vec<f64>>> {
    if !(step > 0.0) || !(u_max >= 0.0) {
        return Err(Error::InvalidArgument("input grid needs step > 0 and u_max >= 0".into()));
    }
    let n = (u_max / step + 1e-9).floor() as i64;
    Ok((-n..=n).map(|k| vec![k as f64 * step]).collect())
}

impl GridAbstraction {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        eta: Vec<f64>,
        input_values: Vec<Vec<f64>>,
        tau: f64,
        disturbance_box: Vec<Interval>,
    ) -> Result<Self> {
        let g = GridAbstraction {
            lower,
            upper,
            eta,
            input_values,
            tau,
            disturbance_box,
            substeps: default_substeps(),
            growth: GrowthBound::Exact,
            delta_bar: 0.0,
            output_band: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn from_spec(spec: &GridSpec, u_max: f64, disturbance: Vec<Interval>) -> Result<Self> {
        let mut g = GridAbstraction::new(
            spec.lower.clone(),
            spec.upper.clone(),
            spec.eta.clone(),
            uniform_inputs(spec.u_max.unwrap_or(u_max), spec.u_step)?,
            spec.tau,
            spec.disturbance.clone().unwrap_or(disturbance),
        )?;
        g.substeps = spec.substeps;
        g.growth = spec.growth;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.eta.len() != d {
            return Err(Error::Dimension("grid bounds and widths must share one dimension".into()));
        }
        for i in 0..d {
            if !(self.eta[i] > 0.0) || !(self.lower[i] < self.upper[i]) {
                return Err(Error::InvalidArgument(format!("grid dimension {i}: need eta > 0 and lower < upper")));
            }
        }
        if !(self.tau > 0.0) || self.substeps == 0 {
            return Err(Error::InvalidArgument("tau and substeps must be positive".into()));
        }
        if self.input_values.is_empty() {
            return Err(Error::InvalidArgument("input list is empty".into()));
        }
        if self.input_values.iter().any(|u| u.len() != self.input_values[0].len()) {
            return Err(Error::Dimension("inputs of different sizes".into()));
        }
        if self.disturbance_box.iter().any(|iv| iv.is_empty() || !iv.lo.is_finite() || !iv.hi.is_finite()) {
            return Err(Error::InvalidArgument("disturbance box must be finite and non-empty".into()));
        }
        if self.dims().iter().any(|n| *n > u16::MAX as usize) {
            return Err(Error::InvalidArgument("too many cells along one axis".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.dim())
            .map(|i| (((self.upper[i] - self.lower[i]) / self.eta[i]) - 1e-9).ceil().max(1.0) as usize)
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// Upper corner of the last cell along each axis.
    fn reach(&self) -> Vec<f64> {
        self.dims().iter().enumerate().map(|(i, n)| self.lower[i] + *n as f64 * self.eta[i]).collect()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.dims()
            .iter()
            .map(|n| {
                let k = idx % n;
                idx /= n;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let dims = self.dims();
        let mut idx = 0;
        for i in (0..dims.len()).rev() {
            idx = idx * dims[i] + multi[i];
        }
        idx
    }

    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let dims = self.dims();
        let reach = self.reach();
        let mut multi = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            if !(x[i] >= self.lower[i] && x[i] <= reach[i]) {
                return None;
            }
            multi.push((((x[i] - self.lower[i]) / self.eta[i]).floor() as usize).min(dims[i] - 1));
        }
        Some(self.flat_index(&multi))
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(i, k)| self.lower[i] + (*k as f64 + 0.5) * self.eta[i])
            .collect()
    }

    pub fn cell_bounds(&self, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.multi_index(idx);
        let lo: Vec<f64> = (0..m.len()).map(|i| self.lower[i] + m[i] as f64 * self.eta[i]).collect();
        let hi = (0..m.len()).map(|i| lo[i] + self.eta[i]).collect();
        (lo, hi)
    }

    /// Output range of a cell under the row `c`.
    pub fn output_range(&self, idx: usize, c: &[f64]) -> Interval {
        let ctr = self.cell_center(idx);
        let mid: f64 = c.iter().zip(&ctr).map(|(a, b)| a * b).sum();
        let rad: f64 = c.iter().zip(&self.eta).map(|(a, e)| a.abs() * e / 2.0).sum();
        Interval::new(mid - rad, mid + rad)
    }
}

/// Over-approximated one-step successors for every (cell, input) pair.
#[derive(Debug, Clone)]
pub struct TransitionRelation {
    pub grid: GridAbstraction,
    pub dims: Vec<usize>,
    pub n_inputs: usize,
    lo: Vec<u16>,
    hi: Vec<u16>,
    valid: Vec<bool>,
    /// Growth-bound radius at `τ`.
    pub radius: Vec<f64>,
    pub out_of_domain: usize,
    pub tube_rejected: usize,
}

impl TransitionRelation {
    pub fn n_cells(&self) -> usize {
        self.valid.len() / self.n_inputs
    }

    pub fn is_valid(&self, cell: usize, input: usize) -> bool {
        self.valid[cell * self.n_inputs + input]
    }

    /// Index box `[lo, hi]` of successor cells.
    pub fn successor_box(&self, cell: usize, input: usize) -> Option<(&[u16], &[u16])> {
        let k = cell * self.n_inputs + input;
        if !self.valid[k] {
            return None;
        }
        let d = self.dims.len();
        Some((&self.lo[k * d..(k + 1) * d], &self.hi[k * d..(k + 1) * d]))
    }

    pub fn successors(&self, cell: usize, input: usize) -> Vec<usize> {
        let Some((lo, hi)) = self.successor_box(cell, input) else {
            return vec![];
        };
        let mut out = Vec::new();
        let mut cur: Vec<usize> = lo.iter().map(|v| *v as usize).collect();
        loop {
            out.push(self.grid.flat_index(&cur));
            let mut i = 0;
            loop {
                if i == cur.len() {
                    return out;
                }
                if cur[i] < hi[i] as usize {
                    cur[i] += 1;
                    break;
                }
                cur[i] = lo[i] as usize;
                i += 1;
            }
        }
    }
}

/// Radii of the reachable tube at each substep, shared by all cells.
fn tube_radii(m2: &SystemModel, grid: &GridAbstraction) -> Result<Vec<Vector>> {
    let n = m2.n();
    let h = grid.tau / grid.substeps as f64;
    let d = m2.d();
    let dr = Vector::from_iterator(grid.disturbance_box.len(), grid.disturbance_box.iter().map(|iv| iv.width() / 2.0));
    let rho = d.abs() * dr;
    let r0 = Vector::from_iterator(n, grid.eta.iter().map(|e| e / 2.0));
    let nonlinear = grid.delta_bar != 0.0 && m2.e.iter().any(|v| *v != 0.0) && !m2.is_linear();
    let mut radii = Vec::with_capacity(grid.substeps + 1);
    if grid.growth == GrowthBound::Exact && !nonlinear {
        let step = expm(&(&m2.a * h));
        let widen = expm(&(m2.a.abs() * h));
        let mut phi = Mat::identity(n, n);
        let mut acc = Vector::zeros(n);
        radii.push(r0.clone());
        for _ in 0..grid.substeps {
            acc += phi.abs() * &widen * &rho * h;
            phi = &phi * &step;
            radii.push(phi.abs() * &r0 + &acc);
        }
    } else {
        let lam = Mat::from_fn(n, n, |i, j| {
            let nl = grid.delta_bar * (m2.e[(i, 0)] * m2.f[(0, j)]).abs();
            if i == j {
                m2.a[(i, i)] + nl
            } else {
                m2.a[(i, j)].abs() + nl
            }
        });
        let mut aug = Mat::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&lam);
        aug.view_mut((0, n), (n, 1)).copy_from(&rho);
        let step = expm(&(aug * h));
        let mut z = Vector::zeros(n + 1);
        z.rows_mut(0, n).copy_from(&r0);
        z[n] = 1.0;
        radii.push(r0.clone());
        for _ in 0..grid.substeps {
            z = &step * z;
            radii.push(z.rows(0, n).into_owned());
        }
    }
    // integration error of the centre
    Ok(radii.into_iter().map(|r| r.add_scalar(1e-9)).collect())
}

/// Slack in cell units when snapping tube boxes to the grid.
const INDEX_TOL: f64 = 1e-6;

pub fn build_abstraction(m2: &SystemModel, grid: &GridAbstraction) -> Result<TransitionRelation> {
    grid.validate()?;
    let dim = grid.dim();
    if m2.n() != dim {
        return Err(Error::Dimension(format!("model has {} states, grid has {dim} axes", m2.n())));
    }
    if grid.input_values[0].len() != m2.p() {
        return Err(Error::Dimension("input values do not match the model inputs".into()));
    }
    if grid.disturbance_box.len() != m2.q() + m2.r() {
        return Err(Error::Dimension(format!(
            "disturbance box has {} channels, model has {}",
            grid.disturbance_box.len(),
            m2.q() + m2.r()
        )));
    }
    let radii = tube_radii(m2, grid)?;
    let rad = radii.last().unwrap().clone();
    let reach = grid.reach();
    for i in 0..dim {
        if 2.0 * rad[i] >= reach[i] - grid.lower[i] {
            return Err(Error::InvalidArgument(format!(
                "growth radius {:.3} on axis {i} covers the whole domain; reduce tau or the disturbance box",
                rad[i]
            )));
        }
    }
    let dims = grid.dims();
    let n_cells = grid.cell_count();
    let n_inputs = grid.input_values.len();
    let h = grid.tau / grid.substeps as f64;
    let q = m2.q();
    let dc = Vector::from_iterator(grid.disturbance_box.len(), grid.disturbance_box.iter().map(|iv| 0.5 * (iv.lo + iv.hi)));
    let (vc, wc) = (dc.rows(0, q).into_owned(), dc.rows(q, m2.r()).into_owned());
    let inputs: Vec<Vector> = grid.input_values.iter().map(|u| Vector::from_row_slice(u)).collect();
    let c_row: Vec<f64> = m2.c.row(0).iter().copied().collect();
    let c_pad: Vec<f64> = radii.iter().map(|r| c_row.iter().zip(r.iter()).map(|(a, b)| a.abs() * b).sum()).collect();

    type CellOut = Vec<(bool, bool, Vec<u16>, Vec<u16>)>;
    let per_cell: Vec<CellOut> = (0..n_cells)
        .into_par_iter()
        .map(|cell| {
            let x0 = Vector::from_vec(grid.cell_center(cell));
            inputs
                .iter()
                .map(|u| {
                    let mut x = x0.clone();
                    let mut tube_ok = true;
                    let f = |s: &Vector| m2.rhs(s, u, &vc, &wc);
                    for k in 0..=grid.substeps {
                        if let Some(band) = &grid.output_band {
                            let y: f64 = c_row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                            if y - c_pad[k] < band.lo || y + c_pad[k] > band.hi {
                                tube_ok = false;
                                break;
                            }
                        }
                        if k < grid.substeps {
                            x = crate::models::rk4_step(f, &x, h);
                        }
                    }
                    if !tube_ok {
                        return (false, true, vec![], vec![]);
                    }
                    let mut lo = Vec::with_capacity(dim);
                    let mut hi = Vec::with_capacity(dim);
                    for i in 0..dim {
                        // positions in cell units; cells are closed boxes
                        let a = (x[i] - rad[i] - grid.lower[i]) / grid.eta[i];
                        let b = (x[i] + rad[i] - grid.lower[i]) / grid.eta[i];
                        if !(a >= -INDEX_TOL && b <= dims[i] as f64 + INDEX_TOL) {
                            return (false, false, vec![], vec![]);
                        }
                        let ia = ((a + INDEX_TOL).floor().max(0.0) as usize).min(dims[i] - 1);
                        let ib = (((b - INDEX_TOL).ceil() as usize).max(1) - 1).clamp(ia, dims[i] - 1);
                        lo.push(ia as u16);
                        hi.push(ib as u16);
                    }
                    (true, false, lo, hi)
                })
                .collect()
        })
        .collect();

    let mut lo = vec![0u16; n_cells * n_inputs * dim];
    let mut hi = vec![0u16; n_cells * n_inputs * dim];
    let mut valid = vec![false; n_cells * n_inputs];
    let (mut ood, mut tube) = (0, 0);
    for (cell, outs) in per_cell.into_iter().enumerate() {
        for (j, (ok, tube_bad, l, u)) in outs.into_iter().enumerate() {
            let k = cell * n_inputs + j;
            if ok {
                valid[k] = true;
                lo[k * dim..(k + 1) * dim].copy_from_slice(&l);
                hi[k * dim..(k + 1) * dim].copy_from_slice(&u);
            } else if tube_bad {
                tube += 1;
            } else {
                ood += 1;
            }
        }
    }
    Ok(TransitionRelation {
        grid: grid.clone(),
        dims,
        n_inputs,
        lo,
        hi,
        valid,
        radius: rad.iter().copied().collect(),
        out_of_domain: ood,
        tube_rejected: tube,
    })
}

/// Counts set cells inside index boxes via an n-dimensional prefix sum.
struct BoxCounter {
    strides: Vec<usize>,
    sums: Vec<u32>,
}

impl BoxCounter {
    fn new(dims: &[usize], set: &[bool]) -> Self {
        let d = dims.len();
        let ext: Vec<usize> = dims.iter().map(|n| n + 1).collect();
        let mut strides = vec![1; d];
        for i in 1..d {
            strides[i] = strides[i - 1] * ext[i - 1];
        }
        let total: usize = ext.iter().product();
        let mut sums = vec![0u32; total];
        // scatter with a +1 offset in every axis
        let mut multi = vec![0usize; d];
        for (idx, on) in set.iter().enumerate() {
            if *on {
                let mut rem = idx;
                for i in 0..d {
                    multi[i] = rem % dims[i];
                    rem /= dims[i];
                }
                let pos: usize = (0..d).map(|i| (multi[i] + 1) * strides[i]).sum();
                sums[pos] = 1;
            }
        }
        for axis in 0..d {
            let s = strides[axis];
            for pos in 0..total {
                if (pos / s) % ext[axis] != 0 {
                    sums[pos] += sums[pos - s];
                }
            }
        }
        BoxCounter { strides, sums }
    }

    fn count(&self, lo: &[u16], hi: &[u16]) -> i64 {
        let d = lo.len();
        let mut total = 0i64;
        for corner in 0..(1usize << d) {
            let mut pos = 0;
            let mut sign = 1i64;
            for i in 0..d {
                if corner >> i & 1 == 1 {
                    pos += lo[i] as usize * self.strides[i];
                    sign = -sign;
                } else {
                    pos += (hi[i] as usize + 1) * self.strides[i];
                }
            }
            total += sign * self.sums[pos] as i64;
        }
        total
    }
}

fn volume(lo: &[u16], hi: &[u16]) -> i64 {
    lo.iter().zip(hi).map(|(a, b)| *b as i64 - *a as i64 + 1).product()
}

/// Cells with some input whose successors all lie in `set`.
fn pre(rel: &TransitionRelation, set: &[bool], candidates: &[bool]) -> Vec<bool> {
    let counter = BoxCounter::new(&rel.dims, set);
    (0..rel.n_cells())
        .into_par_iter()
        .map(|cell| {
            candidates[cell]
                && (0..rel.n_inputs).any(|j| {
                    rel.successor_box(cell, j)
                        .is_some_and(|(lo, hi)| counter.count(lo, hi) == volume(lo, hi))
                })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub outer: usize,
    pub inner_steps: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymbolicController {
    pub grid: GridAbstraction,
    pub winning: Vec<bool>,
    /// Distance to the target in controller steps; `u32::MAX` off the winning set.
    pub rank: Vec<u32>,
    /// Indices into `grid.input_values`, best first.
    pub inputs: Vec<Vec<u16>>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub controller: SymbolicController,
    pub iterations: Vec<IterationRecord>,
}

impl Synthesis {
    pub fn is_empty(&self) -> bool {
        !self.controller.winning.iter().any(|w| *w)
    }

    pub fn winning_count(&self) -> usize {
        self.controller.winning.iter().filter(|w| **w).count()
    }
}

/// Input order used to break ties: smaller magnitude first, then negative first.
fn input_order(values: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let norm = |u: &Vec<f64>| u.iter().map(|v| v * v).sum::<f64>();
    idx.sort_by(|&a, &b| {
        norm(&values[a])
            .total_cmp(&norm(&values[b]))
            .then_with(|| values[a].iter().zip(&values[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
    });
    idx
}

/// `νZ. μY. ((T̂ ∩ Pre(Z)) ∪ Pre(Y)) \ Â`.
pub fn synthesize_recurrence(rel: &TransitionRelation, target: &[bool], avoid: &[bool]) -> Result<Synthesis> {
    let n = rel.n_cells();
    if target.len() != n || avoid.len() != n {
        return Err(Error::Dimension("target/avoid sets must cover every cell".into()));
    }
    let free: Vec<bool> = avoid.iter().map(|a| !a).collect();
    let mut z = free.clone();
    let mut rank = vec![u32::MAX; n];
    let mut iterations = Vec::new();
    for outer in 0.. {
        let tz: Vec<bool> = (0..n).map(|c| target[c] && z[c]).collect();
        let goal = pre(rel, &z, &tz);
        let mut y = goal.clone();
        rank = goal.iter().map(|g| if *g { 0 } else { u32::MAX }).collect();
        let mut inner = 0;
        loop {
            let cand: Vec<bool> = (0..n).map(|c| free[c] && !y[c]).collect();
            let add = pre(rel, &y, &cand);
            if !add.iter().any(|a| *a) {
                break;
            }
            inner += 1;
            for c in 0..n {
                if add[c] {
                    y[c] = true;
                    rank[c] = inner as u32;
                }
            }
        }
        let size = y.iter().filter(|v| **v).count();
        iterations.push(IterationRecord { outer, inner_steps: inner, size });
        if y == z {
            break;
        }
        z = y;
    }
    let order = input_order(&rel.grid.input_values);
    let inputs: Vec<Vec<u16>> = (0..n)
        .into_par_iter()
        .map(|c| {
            if !z[c] {
                return vec![];
            }
            order
                .iter()
                .copied()
                .filter(|&j| {
                    rel.is_valid(c, j)
                        && rel.successors(c, j).iter().all(|&s| z[s] && (rank[c] == 0 || rank[s] < rank[c]))
                })
                .map(|j| j as u16)
                .collect()
        })
        .collect();
    Ok(Synthesis {
        controller: SymbolicController { grid: rel.grid.clone(), winning: z, rank, inputs },
        iterations,
    })
}

/// Target cells lie fully inside `T̂`; avoid cells touch the complement of `B̂`.
pub fn cells_for_spec(grid: &GridAbstraction, c_row: &[f64], shrunk: &FreqSpec) -> Result<(Vec<bool>, Vec<bool>)> {
    let FreqSpec::ReachAvoid { target, safe } = shrunk else {
        return Err(Error::InvalidArgument("grid sets need a reach-avoid spec".into()));
    };
    if c_row.len() != grid.dim() {
        return Err(Error::Dimension("output row does not match the grid".into()));
    }
    let n = grid.cell_count();
    let ranges: Vec<Interval> = (0..n).map(|c| grid.output_range(c, c_row)).collect();
    Ok((
        ranges.iter().map(|r| r.subset_of(target)).collect(),
        ranges.iter().map(|r| !r.subset_of(safe)).collect(),
    ))
}

impl SymbolicController {
    pub fn winning_count(&self) -> usize {
        self.winning.iter().filter(|w| **w).count()
    }

    pub fn valid_inputs(&self, cell: usize) -> Vec<Vec<f64>> {
        self.inputs[cell].iter().map(|j| self.grid.input_values[*j as usize].clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let header = serde_json::to_string(&self.grid).expect("grid serializes");
        writeln!(out, "# {header}")?;
        for c in 0..self.winning.len() {
            if !self.winning[c] {
                continue;
            }
            let us: Vec<String> = self
                .valid_inputs(c)
                .iter()
                .map(|u| u.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
                .collect();
            writeln!(out, "{c};{};{}", self.rank[c], us.join(";"))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn read<R: std::io::Read>(input: R) -> Result<Self> {
        let mut lines = std::io::BufReader::new(input).lines();
        let head = lines.next().ok_or_else(|| Error::parse("controller", "empty file"))??;
        let grid: GridAbstraction = serde_json::from_str(head.trim_start_matches('#').trim())
            .map_err(|e| Error::parse("controller header", e))?;
        grid.validate()?;
        let n = grid.cell_count();
        let mut ctrl = SymbolicController { winning: vec![false; n], rank: vec![u32::MAX; n], inputs: vec![vec![]; n], grid };
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = || format!("controller line {}", ln + 2);
            let mut parts = line.split(';');
            let cell: usize = parts.next().unwrap_or("").trim().parse().map_err(|e| Error::parse(ctx(), e))?;
            let rank: u32 = parts.next().unwrap_or("").trim().parse().map_err(|e| Error::parse(ctx(), e))?;
            if cell >= n {
                return Err(Error::parse(ctx(), format!("cell {cell} outside the grid")));
            }
            let mut idx = Vec::new();
            for p in parts {
                let u: Vec<f64> = p
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(ctx(), e))?;
                let j = ctrl
                    .grid
                    .input_values
                    .iter()
                    .position(|v| v.len() == u.len() && v.iter().zip(&u).all(|(a, b)| (a - b).abs() <= 1e-12))
                    .ok_or_else(|| Error::parse(ctx(), format!("input {p} not in the grid's input list")))?;
                idx.push(j as u16);
            }
            if idx.is_empty() {
                return Err(Error::parse(ctx(), "winning cell without inputs"));
            }
            ctrl.winning[cell] = true;
            ctrl.rank[cell] = rank;
            ctrl.inputs[cell] = idx;
        }
        Ok(ctrl)
    }
}

/// Tie-broken input of the cell containing `x2`.
pub fn control_lookup(ctrl: &SymbolicController, x2: &[f64]) -> Result<Vec<f64>> {
    let cell = ctrl.grid.cell_of(x2).ok_or_else(|| Error::OutOfGrid(x2.to_vec()))?;
    match ctrl.inputs[cell].first() {
        Some(j) if ctrl.winning[cell] => Ok(ctrl.grid.input_values[*j as usize].clone()),
        _ => Err(Error::LosingCell(cell)),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Controller(&'a SymbolicController),
    /// `u₂ ≡ 0`: only the interface acts.
    Zero,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopReport {
    pub max_mismatch: f64,
    pub max_v: f64,
    /// Sampling instants where `x₂` was outside the winning set.
    pub soundness_violations: Vec<f64>,
    pub concrete: Option<Verdict>,
    pub abstract_: Option<Verdict>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub trace1: Trace,
    pub trace2: Trace,
    pub report: ClosedLoopReport,
}

/// Runs the refined controller on the concrete model. `u₂` is sampled every
/// `τ` (taken from the controller grid, or `tau` for the zero policy).
#[allow(clippy::too_many_arguments)]
pub fn closed_loop(
    m1: &SystemModel,
    m2: &SystemModel,
    cert: &RsfCertificate,
    policy: Policy,
    d1: &Signal,
    x1_0: &Vector,
    x2_0: &Vector,
    horizon: f64,
    dt: f64,
    tau: f64,
    spec: Option<&FreqSpec>,
) -> Result<ClosedLoop> {
    let tau = match policy {
        Policy::Controller(c) => c.grid.tau,
        Policy::Zero => tau,
    };
    if !(dt > 0.0) || dt > tau + 1e-12 {
        return Err(Error::InvalidArgument("need 0 < dt <= tau".into()));
    }
    let hold = (tau / dt).round() as usize;
    if ((hold as f64) * dt - tau).abs() > 1e-9 * tau.max(1.0) {
        return Err(Error::InvalidArgument("tau must be a multiple of dt".into()));
    }
    let p2 = m2.p();
    let mut held = Vector::zeros(p2);
    let mut violations = Vec::new();
    let mut pol = |k: usize, t: f64, x2: &Vector| -> Result<Vector> {
        if k % hold == 0 {
            if let Policy::Controller(ctrl) = policy {
                match control_lookup(ctrl, x2.as_slice()) {
                    Ok(u) => held = Vector::from_vec(u),
                    Err(Error::OutOfGrid(_)) | Err(Error::LosingCell(_)) => violations.push(t),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(held.clone())
    };
    let (trace1, trace2) = simulate_pair(cert, m1, m2, x1_0, x2_0, d1, &mut pol, horizon, dt)?;
    let mut max_mismatch = 0.0f64;
    let mut max_v = 0.0f64;
    for k in 0..trace1.len() {
        max_mismatch = max_mismatch.max((&trace1.y[k] - &trace2.y[k]).norm());
        max_v = max_v.max(crate::rsf::eval_v(cert, &trace1.x[k], &trace2.x[k]));
    }
    let ctx = MonitorContext::default();
    let (concrete, abstract_) = match spec {
        Some(s) => (Some(monitor(&trace1, s, &ctx)?), Some(monitor(&trace2, s, &ctx)?)),
        None => (None, None),
    };
    Ok(ClosedLoop {
        trace1,
        trace2,
        report: ClosedLoopReport { max_mismatch, max_v, soundness_violations: violations, concrete, abstract_ },
    })
}

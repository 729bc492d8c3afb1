//! Interval assume-guarantee contracts and the multi-area scenario runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{load_model, rk4_step, LoadedModel, SystemModel, Trace};
use crate::nets_data;
use crate::numerics::{Mat, Vector};
use crate::rsf::{
    construct_abstraction, epsilon_bound, interface_d_raw, interface_u_raw, EpsilonQuery, PipelineOptions,
    RsfCertificate,
};
use crate::specs::{monitor, monitor_all, shrink_spec, FreqSpec, Interval, MonitorContext, Shrunk, Verdict};
use crate::symbolic::{
    build_abstraction, cells_for_spec, control_lookup, synthesize_recurrence, GridAbstraction, GridSpec,
    SymbolicController,
};

fn bands(spec: &FreqSpec, channel: &str) -> Result<(Interval, Interval)> {
    match spec {
        FreqSpec::ReachAvoid { target, safe } => Ok((*target, *safe)),
        _ => Err(Error::Incomparable(format!("{channel}: guarantee is not a reach-avoid box"))),
    }
}

fn show(iv: &Interval) -> String {
    format!("[{}, {}]", iv.lo, iv.hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub name: String,
    /// External disturbance channels with their magnitude bounds.
    #[serde(default)]
    pub external: BTreeMap<String, f64>,
    /// Assumed bands on neighbour outputs, one per coupling row.
    #[serde(default)]
    pub internal: Vec<(String, Interval)>,
    pub guarantees: BTreeMap<String, FreqSpec>,
}

impl Contract {
    /// Contract of area `id`: external channel `v{id}`, guarantee on `f{id}`.
    pub fn area(id: usize, d_max: f64, spec: FreqSpec) -> Contract {
        Contract {
            name: format!("area{id}"),
            external: BTreeMap::from([(format!("v{id}"), d_max)]),
            internal: vec![],
            guarantees: BTreeMap::from([(format!("f{id}"), spec)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (ch, d) in &self.external {
            if !(*d >= 0.0) {
                return Err(Error::InvalidArgument(format!("{}: bound on {ch} must be non-negative", self.name)));
            }
        }
        for (k, (ch, iv)) in self.internal.iter().enumerate() {
            if iv.is_empty() || iv.lo.is_nan() || iv.hi.is_nan() {
                return Err(Error::InvalidArgument(format!("{}: empty assumption on {ch}", self.name)));
            }
            if self.internal[..k].iter().any(|(c, _)| c == ch) {
                return Err(Error::InvalidArgument(format!("{}: {ch} assumed twice", self.name)));
            }
        }
        for (ch, g) in &self.guarantees {
            let (t, b) = bands(g, ch)?;
            if t.is_empty() || b.is_empty() {
                return Err(Error::InvalidArgument(format!("{}: empty guarantee on {ch}", self.name)));
            }
        }
        Ok(())
    }

    pub fn assumption(&self, channel: &str) -> Option<&Interval> {
        self.internal.iter().find(|(c, _)| c == channel).map(|(_, iv)| iv)
    }

    /// The guarantee a neighbour reads through `channel`.
    fn source(&self, channel: &str) -> Result<&FreqSpec> {
        if let Some(g) = self.guarantees.get(channel) {
            return Ok(g);
        }
        match self.guarantees.values().collect::<Vec<_>>()[..] {
            [only] => Ok(only),
            _ => Err(Error::Composition(format!("{channel}: {} does not guarantee it", self.name))),
        }
    }
}

fn check_coupling(contracts: &[Contract], coupling: &Mat) -> Result<()> {
    let rows: usize = contracts.iter().map(|c| c.internal.len()).sum();
    if coupling.nrows() != rows || (rows > 0 && coupling.ncols() != contracts.len()) {
        return Err(Error::Dimension(format!(
            "coupling is {}x{}, contracts need {rows}x{}",
            coupling.nrows(),
            coupling.ncols(),
            contracts.len()
        )));
    }
    Ok(())
}

/// Rows of the coupling matrix owned by each contract, with their channel.
fn rows_of(contracts: &[Contract]) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    for (i, c) in contracts.iter().enumerate() {
        for (ch, _) in &c.internal {
            out.push((out.len(), i, ch.as_str()));
        }
    }
    out
}

/// Conjunction of the member guarantees. Every internal assumption must be
/// implied by the guarantees of the contracts feeding it.
pub fn compose_contracts(contracts: &[Contract], coupling: &Mat) -> Result<Contract> {
    if contracts.is_empty() {
        return Err(Error::InvalidArgument("nothing to compose".into()));
    }
    for c in contracts {
        c.validate()?;
    }
    check_coupling(contracts, coupling)?;
    let mut guarantees = BTreeMap::new();
    let mut external: BTreeMap<String, f64> = BTreeMap::new();
    for c in contracts {
        for (ch, g) in &c.guarantees {
            if guarantees.insert(ch.clone(), g.clone()).is_some() {
                return Err(Error::Composition(format!("{ch}: guaranteed by more than one contract")));
            }
        }
        for (ch, d) in &c.external {
            let e = external.entry(ch.clone()).or_insert(*d);
            *e = e.max(*d);
        }
    }
    for (row, i, ch) in rows_of(contracts) {
        let assumed = contracts[i].assumption(ch).copied().unwrap_or_else(Interval::everything);
        let sources: Vec<usize> = (0..coupling.ncols()).filter(|j| coupling[(row, *j)] != 0.0).collect();
        if sources.is_empty() {
            return Err(Error::Composition(format!("{ch}: no contract feeds {}", contracts[i].name)));
        }
        for j in sources {
            if j == i {
                return Err(Error::Composition(format!("{ch}: {} is coupled to itself", contracts[i].name)));
            }
            let (_, safe) = bands(contracts[j].source(ch)?, ch)?;
            if !safe.subset_of(&assumed) {
                return Err(Error::Composition(format!(
                    "{ch}: {} guarantees {} but {} assumes {}",
                    contracts[j].name,
                    show(&safe),
                    contracts[i].name,
                    show(&assumed)
                )));
            }
        }
    }
    Ok(Contract {
        name: contracts.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+"),
        external,
        internal: vec![],
        guarantees,
    })
}

fn same_keys<'a>(a: impl Iterator<Item = &'a String>, b: impl Iterator<Item = &'a String>, what: &str) -> Result<()> {
    let mut a: Vec<&String> = a.collect();
    let mut b: Vec<&String> = b.collect();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::Incomparable(format!("{what} channels differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `c_i ≼ c_j`: `c_i` assumes less and guarantees more.
pub fn check_refinement(c_i: &Contract, c_j: &Contract) -> Result<bool> {
    same_keys(c_i.external.keys(), c_j.external.keys(), "external")?;
    same_keys(c_i.internal.iter().map(|(c, _)| c), c_j.internal.iter().map(|(c, _)| c), "internal")?;
    same_keys(c_i.guarantees.keys(), c_j.guarantees.keys(), "guarantee")?;
    for (ch, d) in &c_j.external {
        if *d > c_i.external[ch] {
            return Ok(false);
        }
    }
    for (ch, iv) in &c_j.internal {
        if !iv.subset_of(c_i.assumption(ch).expect("same channels")) {
            return Ok(false);
        }
    }
    for (ch, g) in &c_i.guarantees {
        let (ti, bi) = bands(g, ch)?;
        let (tj, bj) = bands(&c_j.guarantees[ch], ch)?;
        if !ti.subset_of(&tj) || !bi.subset_of(&bj) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Internal-disturbance box of every coupling row: the coupling gains
/// applied to the neighbours' safe bands, summed as intervals.
pub fn worst_case_internal(contracts: &[Contract], coupling: &Mat) -> Result<Vec<Vec<Interval>>> {
    check_coupling(contracts, coupling)?;
    let mut out: Vec<Vec<Interval>> = contracts.iter().map(|_| Vec::new()).collect();
    for (row, i, ch) in rows_of(contracts) {
        let mut sum = Interval::point(0.0);
        for (j, c) in contracts.iter().enumerate() {
            let g = coupling[(row, j)];
            if g == 0.0 {
                continue;
            }
            let (_, safe) = bands(c.source(ch)?, ch)?;
            if !safe.lo.is_finite() || !safe.hi.is_finite() {
                return Err(Error::InvalidArgument(format!("{ch}: guarantee of {} is unbounded", c.name)));
            }
            sum = sum.plus(&safe.scale(g));
        }
        out[i].push(sum);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    Isolated,
    Compositional,
}

/// A bundled spec name or an inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecRef {
    Named(String),
    Inline(FreqSpec),
}

impl SpecRef {
    pub fn resolve(&self) -> Result<FreqSpec> {
        let spec = match self {
            SpecRef::Named(name) => nets_data::spec(name)?,
            SpecRef::Inline(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaConfig {
    pub id: usize,
    pub spec: SpecRef,
    /// Constant external disturbance from t = 0, per unit.
    #[serde(default)]
    pub disturbance: f64,
    #[serde(default = "yes")]
    pub controlled: bool,
    /// Band assumed on each neighbour output. Defaults to the global safe band.
    #[serde(default)]
    pub assume: Option<Interval>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub reduced: Option<PathBuf>,
    #[serde(default)]
    pub cert: Option<PathBuf>,
    #[serde(default)]
    pub controller: Option<PathBuf>,
}

fn default_horizon() -> f64 {
    20.0
}
fn default_dt() -> f64 {
    0.005
}
fn default_u2() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    /// `false` runs every area with `u₂ ≡ 0`.
    #[serde(default = "yes")]
    pub controllers: bool,
    pub global: SpecRef,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_u2")]
    pub u2_max: f64,
    #[serde(default)]
    pub grid: Option<PathBuf>,
    pub areas: Vec<AreaConfig>,
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::parse("scenario config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative artifact paths are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&q);
                }
            }
        };
        fix(&mut cfg.grid);
        for a in &mut cfg.areas {
            fix(&mut a.model);
            fix(&mut a.reduced);
            fix(&mut a.cert);
            fix(&mut a.controller);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.horizon >= 0.0) || !(self.u2_max >= 0.0) {
            return Err(Error::InvalidArgument("need dt > 0, horizon >= 0 and u2_max >= 0".into()));
        }
        let map = nets_data::extraction()?;
        let ids: Vec<usize> = self.areas.iter().map(|a| a.id).collect();
        let want: Vec<usize> = map.areas.iter().map(|a| a.id).collect();
        if ids != want {
            return Err(Error::InvalidArgument(format!("scenario areas must be {want:?} in order, got {ids:?}")));
        }
        for a in &self.areas {
            if !a.disturbance.is_finite() {
                return Err(Error::InvalidArgument(format!("area {}: disturbance must be finite", a.id)));
            }
            if a.reduced.is_some() != a.cert.is_some() {
                return Err(Error::InvalidArgument(format!("area {}: give both reduced and cert or neither", a.id)));
            }
            if a.controller.is_some() && a.cert.is_none() {
                return Err(Error::InvalidArgument(format!("area {}: a controller needs its reduced model and cert", a.id)));
            }
            if self.mode == ScenarioMode::Isolated && a.assume.is_some() {
                return Err(Error::InvalidArgument(format!("area {}: isolated areas have no neighbour assumptions", a.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AreaReport {
    pub id: usize,
    pub controlled: bool,
    pub spec: FreqSpec,
    pub epsilon: Option<f64>,
    pub shrunk: Option<FreqSpec>,
    pub winning_cells: Option<usize>,
    pub internal_boxes: Vec<Interval>,
    pub verdict: Verdict,
    pub abstract_verdict: Option<Verdict>,
    pub assumptions_held: bool,
    /// Guarantee met, or an assumption broken.
    pub contract_respected: bool,
    pub max_mismatch: Option<f64>,
    pub max_v: Option<f64>,
    pub soundness_violations: Vec<f64>,
    pub min_output: f64,
    pub max_output: f64,
    #[serde(skip)]
    pub trace: Trace,
    #[serde(skip)]
    pub abstract_trace: Option<Trace>,
    #[serde(skip)]
    pub model: Option<SystemModel>,
    #[serde(skip)]
    pub abstraction: Option<(SystemModel, RsfCertificate)>,
    #[serde(skip)]
    pub controller: Option<SymbolicController>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub mode: ScenarioMode,
    pub controllers: bool,
    pub areas: Vec<AreaReport>,
    pub contracts: Vec<Contract>,
    pub composed: Option<Contract>,
    pub composition_error: Option<String>,
    pub refines_global: Option<bool>,
    pub global_spec: FreqSpec,
    pub global_verdict: Verdict,
    /// Hull of the per-area safe bands: the safety level the network as a
    /// whole can promise.
    pub weakest_guarantee: Interval,
    pub all_contracts_respected: bool,
    /// Composition succeeded and every area met its guarantee, so the
    /// global spec must hold; `false` flags a broken chain of reasoning.
    pub soundness_holds: bool,
    pub elapsed_s: f64,
}

impl ScenarioReport {
    /// `report.json` plus one `area{id}.csv` trace per area.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes"))?;
        written.push(json);
        for a in &self.areas {
            let p = dir.join(format!("area{}.csv", a.id));
            a.trace.save_csv(&p)?;
            written.push(p);
        }
        Ok(written)
    }
}

struct Pair {
    m2: SystemModel,
    cert: RsfCertificate,
    ctrl: SymbolicController,
}

struct Plant {
    m1: SystemModel,
    v: f64,
    pair: Option<Pair>,
}

struct NetRun {
    concrete: Vec<Trace>,
    abstract_: Vec<Option<Trace>>,
    lookups_failed: Vec<Vec<f64>>,
}

/// One RK4 integration of all areas, closed through `coupling` (no rows
/// means decoupled). Controlled areas carry their abstraction along and
/// sample `u₂` every `τ`.
fn simulate_network(plants: &[Plant], coupling: &Mat, horizon: f64, dt: f64) -> Result<NetRun> {
    let n = plants.len();
    let mut off1 = vec![0; n];
    let mut total = 0;
    for (i, p) in plants.iter().enumerate() {
        off1[i] = total;
        total += p.m1.n();
    }
    let mut off2 = vec![0; n];
    let mut holds = vec![1; n];
    for (i, p) in plants.iter().enumerate() {
        if let Some(pair) = &p.pair {
            off2[i] = total;
            total += pair.m2.n();
            let h = (pair.ctrl.grid.tau / dt).round() as usize;
            if h == 0 || ((h as f64) * dt - pair.ctrl.grid.tau).abs() > 1e-9 * pair.ctrl.grid.tau.max(1.0) {
                return Err(Error::InvalidArgument("controller tau must be a multiple of dt".into()));
            }
            holds[i] = h;
        }
    }
    let mut row0 = vec![0; n];
    let mut rows = 0;
    for (i, p) in plants.iter().enumerate() {
        row0[i] = rows;
        rows += p.m1.r();
    }
    if coupling.nrows() != rows || (rows > 0 && coupling.ncols() != plants.iter().map(|p| p.m1.c_int.nrows()).sum::<usize>()) {
        return Err(Error::Dimension("coupling does not match the area models".into()));
    }
    let split = |s: &Vector, i: usize| -> (Vector, Option<Vector>) {
        let p = &plants[i];
        let x1 = s.rows(off1[i], p.m1.n()).into_owned();
        let x2 = p.pair.as_ref().map(|pair| s.rows(off2[i], pair.m2.n()).into_owned());
        (x1, x2)
    };
    let internal = |s: &Vector| -> Vec<Vector> {
        if rows == 0 {
            return plants.iter().map(|p| Vector::zeros(p.m1.r())).collect();
        }
        let y: Vec<f64> = plants
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (&p.m1.c_int * s.rows(off1[i], p.m1.n())).iter().copied().collect::<Vec<_>>())
            .collect();
        let w = coupling * Vector::from_vec(y);
        plants.iter().enumerate().map(|(i, p)| w.rows(row0[i], p.m1.r()).into_owned()).collect()
    };
    let inputs = |i: usize, x1: &Vector, x2: &Option<Vector>, w: &Vector, u2: &Vector| -> (Vector, Vector, Option<Vector>) {
        let p = &plants[i];
        let mut d1 = Vector::zeros(1 + w.len());
        d1[0] = p.v;
        d1.rows_mut(1, w.len()).copy_from(w);
        match (&p.pair, x2) {
            (Some(pair), Some(x2)) => {
                let u1 = interface_u_raw(&pair.cert, &p.m1, x1, x2, u2);
                let d2 = interface_d_raw(&pair.cert, &p.m1, x1, x2, &d1);
                (u1, d1, Some(d2))
            }
            _ => (Vector::zeros(p.m1.p()), d1, None),
        }
    };

    let steps = (horizon / dt).round() as usize;
    let mut state = Vector::zeros(total);
    let mut held: Vec<Vector> =
        plants.iter().map(|p| Vector::zeros(p.pair.as_ref().map_or(0, |pair| pair.m2.p()))).collect();
    let mut run = NetRun {
        concrete: plants.iter().map(|_| Trace { dt, ..Default::default() }).collect(),
        abstract_: plants.iter().map(|p| p.pair.as_ref().map(|_| Trace { dt, ..Default::default() })).collect(),
        lookups_failed: vec![Vec::new(); n],
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let w = internal(&state);
        for i in 0..n {
            let (x1, x2) = split(&state, i);
            if let (Some(pair), Some(x2)) = (&plants[i].pair, &x2) {
                if k % holds[i] == 0 {
                    match control_lookup(&pair.ctrl, x2.as_slice()) {
                        Ok(u) => held[i] = Vector::from_vec(u),
                        Err(Error::OutOfGrid(_)) | Err(Error::LosingCell(_)) => run.lookups_failed[i].push(t),
                        Err(e) => return Err(e),
                    }
                }
            }
            let (u1, d1, d2) = inputs(i, &x1, &x2, &w[i], &held[i]);
            let tr = &mut run.concrete[i];
            tr.t.push(t);
            tr.y.push(plants[i].m1.output(&x1));
            tr.x.push(x1);
            tr.u.push(u1);
            tr.v.push(d1.rows(0, 1).into_owned());
            tr.w.push(d1.rows(1, d1.len() - 1).into_owned());
            if let (Some(pair), Some(x2), Some(d2), Some(tr2)) = (&plants[i].pair, x2, d2, run.abstract_[i].as_mut()) {
                let q2 = pair.m2.q();
                tr2.t.push(t);
                tr2.y.push(pair.m2.output(&x2));
                tr2.x.push(x2);
                tr2.u.push(held[i].clone());
                tr2.v.push(d2.rows(0, q2).into_owned());
                tr2.w.push(d2.rows(q2, pair.m2.r()).into_owned());
            }
        }
        if k == steps {
            break;
        }
        let f = |s: &Vector| -> Vector {
            let w = internal(s);
            let mut out = Vector::zeros(total);
            for i in 0..n {
                let p = &plants[i];
                let (x1, x2) = split(s, i);
                let (u1, d1, d2) = inputs(i, &x1, &x2, &w[i], &held[i]);
                let dx1 = p.m1.rhs(&x1, &u1, &d1.rows(0, 1).into_owned(), &w[i]);
                out.rows_mut(off1[i], p.m1.n()).copy_from(&dx1);
                if let (Some(pair), Some(x2), Some(d2)) = (&p.pair, x2, d2) {
                    let q2 = pair.m2.q();
                    let dx2 = pair.m2.rhs(
                        &x2,
                        &held[i],
                        &d2.rows(0, q2).into_owned(),
                        &d2.rows(q2, pair.m2.r()).into_owned(),
                    );
                    out.rows_mut(off2[i], pair.m2.n()).copy_from(&dx2);
                }
            }
            out
        };
        state = rk4_step(f, &state, dt);
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(t + dt));
        }
    }
    Ok(run)
}

fn relax(id: usize, epsilon: f64, why: impl std::fmt::Display) -> Error {
    Error::Scenario(format!(
        "area {id}: no controller for the shrunk specification (epsilon = {epsilon:.4}): {why}; \
         relax the area specification or its neighbour assumptions"
    ))
}

fn load_area_model(path: &Path) -> Result<SystemModel> {
    match load_model(path)? {
        LoadedModel::Model(m) => Ok(m),
        LoadedModel::Network(_) => Err(Error::InvalidModel(format!("{}: expected a single area model", path.display()))),
    }
}

/// Abstraction, certificate and controller of one controlled area.
fn prepare_area(
    area: &AreaConfig,
    m1: &SystemModel,
    spec: &FreqSpec,
    boxes: &[Interval],
    grid_spec: &GridSpec,
    u2_max: f64,
) -> Result<(Pair, f64, Option<FreqSpec>, usize)> {
    let (m2, cert) = match (&area.reduced, &area.cert) {
        (Some(r), Some(c)) => {
            let m2 = load_area_model(r)?;
            let cert = RsfCertificate::load(c)?;
            cert.check(m1, &m2)?;
            (m2, cert)
        }
        _ => {
            let ab = construct_abstraction(m1, &PipelineOptions::default())?;
            (ab.m2, ab.cert)
        }
    };
    let d_max = std::iter::once(area.disturbance.abs())
        .chain(boxes.iter().map(|b| b.mag()))
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let epsilon = epsilon_bound(&cert, m1, &m2, &EpsilonQuery { d_max, u2_max, ..Default::default() })?;
    if let Some(path) = &area.controller {
        let ctrl = SymbolicController::load(path)?;
        let count = ctrl.winning.iter().filter(|w| **w).count();
        return Ok((Pair { m2, cert, ctrl }, epsilon, None, count));
    }
    let hat = match shrink_spec(spec, epsilon)? {
        Shrunk::Feasible(s) => s,
        Shrunk::Infeasible { reason, .. } => return Err(relax(area.id, epsilon, reason)),
    };
    let mut disturbance = vec![Interval::point(area.disturbance)];
    disturbance.extend_from_slice(boxes);
    let mut grid = GridAbstraction::from_spec(grid_spec, u2_max, disturbance)?;
    if let FreqSpec::ReachAvoid { safe, .. } = &hat {
        grid.output_band = Some(*safe);
    }
    let rel = build_abstraction(&m2, &grid).map_err(|e| relax(area.id, epsilon, e))?;
    let c_row: Vec<f64> = m2.c.row(0).iter().copied().collect();
    let (target, avoid) = cells_for_spec(&grid, &c_row, &hat)?;
    let syn = synthesize_recurrence(&rel, &target, &avoid)?;
    if syn.is_empty() {
        return Err(relax(area.id, epsilon, "winning set is empty"));
    }
    let origin = vec![0.0; m2.n()];
    if control_lookup(&syn.controller, &origin).is_err() {
        return Err(relax(area.id, epsilon, "initial state is not winning"));
    }
    let count = syn.winning_count();
    Ok((Pair { m2, cert, ctrl: syn.controller }, epsilon, Some(hat), count))
}

fn safe_band(spec: &FreqSpec) -> Result<Interval> {
    Ok(bands(spec, "spec")?.1)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let start = Instant::now();
    let map = nets_data::extraction()?;
    let global = cfg.global.resolve()?;
    let gsafe = safe_band(&global)?;
    let grid_spec = match &cfg.grid {
        Some(p) => GridSpec::load(p)?,
        None => nets_data::grid()?,
    };
    let specs = cfg.areas.iter().map(|a| a.spec.resolve()).collect::<Result<Vec<_>>>()?;
    let compositional = cfg.mode == ScenarioMode::Compositional;

    let mut contracts = Vec::new();
    for (a, spec) in cfg.areas.iter().zip(&specs) {
        safe_band(spec)?;
        let mut c = Contract::area(a.id, a.disturbance.abs(), spec.clone());
        if compositional {
            let assumed = a.assume.unwrap_or(gsafe);
            c.internal = map.area(a.id)?.neighbors.iter().map(|j| (format!("f{j}"), assumed)).collect();
        }
        contracts.push(c);
    }
    let coupling = if compositional { nets_data::coupling_matrix(&map)? } else { Mat::zeros(0, cfg.areas.len()) };
    let boxes = worst_case_internal(&contracts, &coupling)?;

    let mut full = None;
    let mut plants = Vec::new();
    let mut prepared = Vec::new();
    for (i, a) in cfg.areas.iter().enumerate() {
        let m1 = match &a.model {
            Some(p) => load_area_model(p)?,
            None => {
                if full.is_none() {
                    full = Some(nets_data::full_network()?);
                }
                let net = full.as_ref().unwrap();
                if compositional {
                    nets_data::extract_area(net, &map, a.id)?
                } else {
                    nets_data::isolated_area(net, &map, a.id)?
                }
            }
        };
        if m1.p() != 1 || m1.q() != 1 || m1.r() != boxes[i].len() {
            return Err(Error::Scenario(format!(
                "area {}: model needs one input, one external channel and {} internal channels",
                a.id,
                boxes[i].len()
            )));
        }
        let pair = if cfg.controllers && a.controlled {
            let (pair, eps, hat, count) = prepare_area(a, &m1, &specs[i], &boxes[i], &grid_spec, cfg.u2_max)?;
            prepared.push(Some((eps, hat, count)));
            Some(pair)
        } else {
            prepared.push(None);
            None
        };
        plants.push(Plant { m1, v: a.disturbance, pair });
    }

    let run = simulate_network(&plants, &coupling, cfg.horizon, cfg.dt)?;
    let ctx = MonitorContext::default();
    let mut areas = Vec::new();
    let outputs: Vec<Vec<f64>> = run.concrete.iter().map(|t| t.output_channel(0)).collect::<Result<_>>()?;
    for (i, a) in cfg.areas.iter().enumerate() {
        let trace = run.concrete[i].clone();
        let verdict = monitor(&trace, &specs[i], &ctx)?;
        let abstract_verdict = run.abstract_[i].as_ref().map(|t| monitor(t, &specs[i], &ctx)).transpose()?;
        let mut assumptions_held = true;
        for (ch, iv) in &contracts[i].internal {
            let j = cfg.areas.iter().position(|x| format!("f{}", x.id) == *ch).expect("neighbour is an area");
            assumptions_held &= outputs[j].iter().all(|y| iv.contains(*y));
        }
        let plant = &plants[i];
        let (mut max_mismatch, mut max_v) = (None, None);
        if let (Some(pair), Some(t2)) = (&plant.pair, &run.abstract_[i]) {
            let mut mm = 0.0f64;
            let mut mv = 0.0f64;
            for k in 0..trace.len() {
                mm = mm.max((&trace.y[k] - &t2.y[k]).norm());
                mv = mv.max(crate::rsf::eval_v(&pair.cert, &trace.x[k], &t2.x[k]));
            }
            max_mismatch = Some(mm);
            max_v = Some(mv);
        }
        let y = &outputs[i];
        areas.push(AreaReport {
            id: a.id,
            controlled: plant.pair.is_some(),
            spec: specs[i].clone(),
            epsilon: prepared[i].as_ref().map(|p| p.0),
            shrunk: prepared[i].as_ref().and_then(|p| p.1.clone()),
            winning_cells: prepared[i].as_ref().map(|p| p.2),
            internal_boxes: boxes[i].clone(),
            contract_respected: !assumptions_held || verdict.satisfied,
            verdict,
            abstract_verdict,
            assumptions_held,
            max_mismatch,
            max_v,
            soundness_violations: run.lookups_failed[i].clone(),
            min_output: y.iter().copied().fold(f64::INFINITY, f64::min),
            max_output: y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            trace,
            abstract_trace: run.abstract_[i].clone(),
            model: Some(plant.m1.clone()),
            abstraction: plant.pair.as_ref().map(|p| (p.m2.clone(), p.cert.clone())),
            controller: plant.pair.as_ref().map(|p| p.ctrl.clone()),
        });
    }

    let (composed, composition_error) = match compose_contracts(&contracts, &coupling) {
        Ok(c) => (Some(c), None),
        Err(Error::Composition(m)) => (None, Some(m)),
        Err(e) => return Err(e),
    };
    let refines_global = match &composed {
        Some(c) => {
            let target = Contract {
                name: "global".into(),
                external: c.external.clone(),
                internal: vec![],
                guarantees: c.guarantees.keys().map(|k| (k.clone(), global.clone())).collect(),
            };
            Some(check_refinement(c, &target)?)
        }
        None => None,
    };
    let items: Vec<(&Trace, &FreqSpec, &MonitorContext)> = areas.iter().map(|a| (&a.trace, &global, &ctx)).collect();
    let global_verdict = monitor_all(&items)?;
    let mut weakest = Interval::new(f64::INFINITY, f64::NEG_INFINITY);
    for s in &specs {
        let b = safe_band(s)?;
        weakest = Interval::new(weakest.lo.min(b.lo), weakest.hi.max(b.hi));
    }
    let all_met = areas.iter().all(|a| a.verdict.satisfied);
    Ok(ScenarioReport {
        mode: cfg.mode,
        controllers: cfg.controllers,
        all_contracts_respected: areas.iter().all(|a| a.contract_respected),
        soundness_holds: !(composed.is_some() && refines_global == Some(true) && all_met) || global_verdict.satisfied,
        areas,
        contracts,
        composed,
        composition_error,
        refines_global,
        global_spec: global,
        global_verdict,
        weakest_guarantee: weakest,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

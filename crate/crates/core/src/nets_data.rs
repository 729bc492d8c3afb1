//! Bundled New England 39-bus data: matrices, extraction map, specs and
//! defaults. `RSFKIT_DATA` points the loaders at another directory with the
//! same file names.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Interconnection, SystemModel};
use crate::numerics::Mat;
use crate::rsf::{EpsilonQuery, RsfCertificate};
use crate::specs::FreqSpec;
use crate::symbolic::GridSpec;

const BUNDLED: &[(&str, &str, &str)] = &[
    ("area1_nonlinear.json", "Area 1 with the storage saturation, 9 states", include_str!("../data/area1_nonlinear.json")),
    ("area1_nonlinear_reduced.json", "published 3-state abstraction of the nonlinear Area 1", include_str!("../data/area1_nonlinear_reduced.json")),
    ("area1_nonlinear_cert.json", "published certificate for the nonlinear Area 1 pair", include_str!("../data/area1_nonlinear_cert.json")),
    ("area1_linear.json", "isolated linear Area 1", include_str!("../data/area1_linear.json")),
    ("area1_linear_reduced.json", "published abstraction of the linear Area 1", include_str!("../data/area1_linear_reduced.json")),
    ("area1_linear_cert.json", "published certificate for the linear Area 1 pair", include_str!("../data/area1_linear_cert.json")),
    ("area1_internal.json", "linear Area 1 with the two neighbour-frequency channels", include_str!("../data/area1_internal.json")),
    ("nets_full.json", "27-state three-area network", include_str!("../data/nets_full.json")),
    ("extraction.json", "state indices of each area", include_str!("../data/extraction.json")),
    ("constants.json", "grid-code constants and default epsilon queries", include_str!("../data/constants.json")),
    ("specs.json", "reach-avoid specs per area and the global spec", include_str!("../data/specs.json")),
    ("grid.json", "default symbolic grid", include_str!("../data/grid.json")),
    ("scenario_isolated.json", "three decoupled areas, unit step in each", include_str!("../data/scenario_isolated.json")),
    ("scenario_compositional.json", "coupled network, unit step in Area 3", include_str!("../data/scenario_compositional.json")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
}

pub fn catalog() -> Vec<CatalogEntry> {
    BUNDLED.iter().map(|(name, description, _)| CatalogEntry { name, description }).collect()
}

fn override_dir() -> Option<PathBuf> {
    std::env::var_os("RSFKIT_DATA").filter(|s| !s.is_empty()).map(PathBuf::from)
}

/// Raw text of a data file.
pub fn read(name: &str) -> Result<String> {
    if let Some(dir) = override_dir() {
        let path = dir.join(name);
        if path.exists() {
            return Ok(std::fs::read_to_string(path)?);
        }
    }
    BUNDLED
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, text)| text.to_string())
        .ok_or_else(|| Error::InvalidArgument(format!("no data file named {name}")))
}

fn parse<T: serde::de::DeserializeOwned>(name: &str) -> Result<T> {
    serde_json::from_str(&read(name)?).map_err(|e| Error::parse(name, e))
}

pub fn model(name: &str) -> Result<SystemModel> {
    SystemModel::from_json_str(&read(name)?)
}

pub fn certificate(name: &str) -> Result<RsfCertificate> {
    RsfCertificate::from_json_str(&read(name)?)
}

pub fn area1_nonlinear() -> Result<SystemModel> {
    model("area1_nonlinear.json")
}

pub fn area1_nonlinear_reduced() -> Result<SystemModel> {
    model("area1_nonlinear_reduced.json")
}

/// Published certificate; its `M` is printed unsymmetric and is symmetrized here.
pub fn area1_nonlinear_cert() -> Result<RsfCertificate> {
    let mut c = certificate("area1_nonlinear_cert.json")?;
    c.m = crate::numerics::symmetrize(&c.m);
    Ok(c)
}

pub fn area1_linear() -> Result<SystemModel> {
    model("area1_linear.json")
}

pub fn area1_linear_reduced() -> Result<SystemModel> {
    model("area1_linear_reduced.json")
}

pub fn area1_linear_cert() -> Result<RsfCertificate> {
    let mut c = certificate("area1_linear_cert.json")?;
    c.m = crate::numerics::symmetrize(&c.m);
    Ok(c)
}

pub fn area1_internal() -> Result<SystemModel> {
    model("area1_internal.json")
}

pub fn full_network() -> Result<SystemModel> {
    model("nets_full.json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedQuery {
    pub name: String,
    pub d_max: f64,
    pub u2_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constants {
    pub lambda: f64,
    pub delta_bar: f64,
    pub ess_max: f64,
    pub ess_min: f64,
    pub f0: f64,
    pub statutory: [f64; 2],
    pub containment: f64,
    pub normal_loss_mw: f64,
    pub shutdown: [f64; 2],
    pub infrequent_deadline: f64,
    pub ffr_inject: f64,
    pub ffr_max: f64,
    pub ffr_hold: f64,
    pub secondary_max: f64,
    pub secondary_hold: f64,
    pub efr_wide_deadband: [f64; 2],
    pub efr_narrow_deadband: [f64; 2],
    pub efr_k_wide: f64,
    pub efr_k_narrow: f64,
    pub efr_respond: f64,
    pub efr_hold: f64,
    pub mw_per_pu: f64,
    pub queries: Vec<NamedQuery>,
}

impl Constants {
    pub fn query(&self, name: &str) -> Result<EpsilonQuery> {
        self.queries
            .iter()
            .find(|q| q.name == name)
            .map(|q| EpsilonQuery { d_max: q.d_max, u2_max: q.u2_max, x1_0: None, x2_0: None })
            .ok_or_else(|| Error::InvalidArgument(format!("no query named {name}")))
    }
}

pub fn constants() -> Result<Constants> {
    parse("constants.json")
}

pub fn specs() -> Result<BTreeMap<String, FreqSpec>> {
    parse("specs.json")
}

pub fn spec(name: &str) -> Result<FreqSpec> {
    specs()?
        .remove(name)
        .ok_or_else(|| Error::InvalidArgument(format!("no spec named {name}")))
}

pub fn grid() -> Result<GridSpec> {
    parse("grid.json")
}

/// Canonical scenario, `"isolated"` or `"compositional"`.
pub fn scenario(name: &str) -> Result<crate::contracts::ScenarioConfig> {
    crate::contracts::ScenarioConfig::from_json_str(&read(&format!("scenario_{name}.json"))?)
}

/// One area of the network, indices 1-based as printed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaMap {
    pub id: usize,
    pub states: Vec<usize>,
    pub frequency_state: usize,
    pub output_gain: f64,
    pub neighbors: Vec<usize>,
}

impl AreaMap {
    fn zero_based(&self) -> Vec<usize> {
        self.states.iter().map(|s| s - 1).collect()
    }

    /// Position of the frequency state inside the area.
    pub fn local_frequency(&self) -> usize {
        self.states.iter().position(|s| *s == self.frequency_state).expect("frequency state belongs to the area")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionMap {
    pub areas: Vec<AreaMap>,
}

impl ExtractionMap {
    pub fn area(&self, id: usize) -> Result<&AreaMap> {
        self.areas
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("area id {id} not in 1..={}", self.areas.len())))
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for a in &self.areas {
            for &s in &a.states {
                if s == 0 || s > n || seen[s - 1] {
                    return Err(Error::InvalidModel(format!("extraction map: bad or repeated state {s}")));
                }
                seen[s - 1] = true;
            }
            if !a.states.contains(&a.frequency_state) {
                return Err(Error::InvalidModel(format!("area {}: frequency state outside the area", a.id)));
            }
        }
        Ok(())
    }
}

pub fn extraction() -> Result<ExtractionMap> {
    parse("extraction.json")
}

/// Area model cut out of the full network. Internal channels are the
/// neighbours' frequency states; with `C_int = C` they enter through the
/// coupling gain `1/output_gain` of each neighbour.
pub fn extract_area(full: &SystemModel, map: &ExtractionMap, area_id: usize) -> Result<SystemModel> {
    map.validate(full.n())?;
    let area = map.area(area_id)?;
    let col = map.areas.iter().position(|a| a.id == area_id).unwrap();
    let idx = area.zero_based();
    let n = idx.len();
    if full.p() != map.areas.len() || full.q() != map.areas.len() {
        return Err(Error::Dimension("full model needs one input and one disturbance per area".into()));
    }
    let a = Mat::from_fn(n, n, |r, c| full.a[(idx[r], idx[c])]);
    let b = Mat::from_fn(n, 1, |r, _| full.b[(idx[r], col)]);
    let g = Mat::from_fn(n, 1, |r, _| full.g[(idx[r], col)]);
    let mut c = Mat::zeros(1, n);
    c[(0, area.local_frequency())] = area.output_gain;
    let mut s = Mat::zeros(n, area.neighbors.len());
    for (k, nb) in area.neighbors.iter().enumerate() {
        let fj = map.area(*nb)?.frequency_state - 1;
        for r in 0..n {
            s[(r, k)] = full.a[(idx[r], fj)];
        }
    }
    let model = SystemModel {
        a,
        b,
        c: c.clone(),
        g,
        s_int: s,
        e: Mat::zeros(n, 1),
        f: Mat::zeros(1, n),
        phi: crate::models::SlopeNonlinearity::zero(),
        c_int: c,
    };
    model.validate()?;
    Ok(model)
}

/// Extracted area with the internal channels dropped.
pub fn isolated_area(full: &SystemModel, map: &ExtractionMap, area_id: usize) -> Result<SystemModel> {
    Ok(extract_area(full, map, area_id)?.without_internal())
}

/// Coupling matrix `𝓜` mapping the stacked internal outputs to the stacked
/// internal disturbances.
pub fn coupling_matrix(map: &ExtractionMap) -> Result<Mat> {
    let r: usize = map.areas.iter().map(|a| a.neighbors.len()).sum();
    let mut m = Mat::zeros(r, map.areas.len());
    let mut row = 0;
    for a in &map.areas {
        for nb in &a.neighbors {
            let j = map.areas.iter().position(|x| x.id == *nb).ok_or_else(|| {
                Error::InvalidModel(format!("area {}: unknown neighbour {nb}", a.id))
            })?;
            m[(row, j)] = 1.0 / map.areas[j].output_gain;
            row += 1;
        }
    }
    Ok(m)
}

/// The three extracted areas closed through their frequency couplings.
pub fn network(full: &SystemModel, map: &ExtractionMap) -> Result<Interconnection> {
    let subsystems = map
        .areas
        .iter()
        .map(|a| extract_area(full, map, a.id))
        .collect::<Result<Vec<_>>>()?;
    let net = Interconnection { subsystems, coupling: coupling_matrix(map)?, t: Mat::zeros(0, 0) };
    net.validate()?;
    Ok(net)
}

/// Places the area blocks and their coupling columns back into a full-size
/// state matrix.
pub fn reembed(areas: &[SystemModel], map: &ExtractionMap, n_full: usize) -> Result<Mat> {
    if areas.len() != map.areas.len() {
        return Err(Error::Dimension("one model per area expected".into()));
    }
    map.validate(n_full)?;
    let mut a = Mat::zeros(n_full, n_full);
    for (model, area) in areas.iter().zip(&map.areas) {
        let idx = area.zero_based();
        if model.n() != idx.len() || model.r() != area.neighbors.len() {
            return Err(Error::Dimension(format!("area {} model does not match the map", area.id)));
        }
        for r in 0..idx.len() {
            for c in 0..idx.len() {
                a[(idx[r], idx[c])] = model.a[(r, c)];
            }
            for (k, nb) in area.neighbors.iter().enumerate() {
                a[(idx[r], map.area(*nb)?.frequency_state - 1)] = model.s_int[(r, k)];
            }
        }
    }
    Ok(a)
}

//! Frequency specifications over finite traces.
//!
//! Deadline operators must resolve inside the trace (strong); unbounded
//! `□` and the `◇` of a recurrence are weak, so obligations still open at
//! the end are reported as pending instead of violated.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::Trace;

/// Closed interval; infinite ends are written as `null` in JSON.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn at_least(lo: f64) -> Self {
        Interval { lo, hi: f64::INFINITY }
    }

    pub fn everything() -> Self {
        Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo <= self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn subset_of(&self, other: &Interval) -> bool {
        self.is_empty() || (other.lo <= self.lo && self.hi <= other.hi)
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.max(other.lo), hi: self.hi.min(other.hi) }
    }

    /// Minkowski sum.
    pub fn plus(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo + other.lo, hi: self.hi + other.hi }
    }

    pub fn scale(&self, g: f64) -> Interval {
        if g == 0.0 {
            return Interval::point(0.0);
        }
        let (a, b) = (self.lo * g, self.hi * g);
        Interval { lo: a.min(b), hi: a.max(b) }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let f = |v: f64| if v.is_finite() { Some(v) } else { None };
        [f(self.lo), f(self.hi)].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [lo, hi]: [Option<f64>; 2] = Deserialize::deserialize(d)?;
        let iv = Interval { lo: lo.unwrap_or(f64::NEG_INFINITY), hi: hi.unwrap_or(f64::INFINITY) };
        if iv.is_empty() {
            return Err(serde::de::Error::custom(format!("interval [{}, {}] is empty", iv.lo, iv.hi)));
        }
        Ok(iv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Conjunction,
    Disjunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum FreqSpec {
    /// `□(◇T ∧ ¬A)` on the frequency deviation, `A` the complement of `B`.
    ReachAvoid {
        #[serde(rename = "T")]
        target: Interval,
        #[serde(rename = "B")]
        safe: Interval,
    },
    /// `[loss ≤ L] ⇒ □(f ∈ S)`.
    StatutoryNormal {
        #[serde(rename = "S")]
        statutory: Interval,
        #[serde(rename = "L")]
        loss_limit: f64,
    },
    /// `[loss ≥ L ∧ f < lower(S)] ⇒ ◇ᵈ(f ∈ S) ∧ □(f ≥ Z)`.
    Infrequent {
        #[serde(rename = "S")]
        statutory: Interval,
        #[serde(rename = "Z")]
        containment: f64,
        deadline: f64,
        #[serde(rename = "L")]
        loss_limit: f64,
    },
    Shutdown { lo: f64, hi: f64 },
    FfrPrimary { t_inject: f64, t_max: f64, hold: f64, p_max: f64 },
    FfrSecondary { t_max: f64, hold: f64, p_max: f64 },
    Efr {
        deadband: Interval,
        /// Ramp limits apply while f is inside this band and outside the deadband.
        envelope: Interval,
        k: f64,
        t_respond: f64,
        hold: f64,
        p_max: f64,
    },
    /// Evaluates `spec` on another output channel.
    OnChannel { channel: usize, spec: Box<FreqSpec> },
    Composite { mode: Mode, members: Vec<FreqSpec> },
}

impl FreqSpec {
    pub fn reach_avoid(target: Interval, safe: Interval) -> Self {
        FreqSpec::ReachAvoid { target, safe }
    }

    pub fn statutory_normal(c: &crate::nets_data::Constants) -> Self {
        FreqSpec::StatutoryNormal {
            statutory: Interval::new(c.statutory[0], c.statutory[1]),
            loss_limit: c.normal_loss_mw,
        }
    }

    pub fn infrequent(c: &crate::nets_data::Constants) -> Self {
        FreqSpec::Infrequent {
            statutory: Interval::new(c.statutory[0], c.statutory[1]),
            containment: c.containment,
            deadline: c.infrequent_deadline,
            loss_limit: c.normal_loss_mw,
        }
    }

    pub fn shutdown(c: &crate::nets_data::Constants) -> Self {
        FreqSpec::Shutdown { lo: c.shutdown[0], hi: c.shutdown[1] }
    }

    pub fn ffr_primary(c: &crate::nets_data::Constants, p_max: f64) -> Self {
        FreqSpec::FfrPrimary { t_inject: c.ffr_inject, t_max: c.ffr_max, hold: c.ffr_hold, p_max }
    }

    pub fn ffr_secondary(c: &crate::nets_data::Constants, p_max: f64) -> Self {
        FreqSpec::FfrSecondary { t_max: c.secondary_max, hold: c.secondary_hold, p_max }
    }

    pub fn efr(c: &crate::nets_data::Constants, wide: bool, p_max: f64) -> Self {
        let (db, k) = if wide {
            (c.efr_wide_deadband, c.efr_k_wide)
        } else {
            (c.efr_narrow_deadband, c.efr_k_narrow)
        };
        FreqSpec::Efr {
            deadband: Interval::new(db[0], db[1]),
            envelope: Interval::new(c.statutory[0], c.statutory[1]),
            k,
            t_respond: c.efr_respond,
            hold: c.efr_hold,
            p_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            FreqSpec::ReachAvoid { target, safe } => {
                if target.is_empty() || safe.is_empty() {
                    return bad("reach-avoid intervals must be non-empty");
                }
            }
            FreqSpec::StatutoryNormal { statutory, .. } if statutory.is_empty() => return bad("empty statutory band"),
            FreqSpec::Infrequent { statutory, containment, deadline, .. } => {
                if !(*containment < statutory.lo) {
                    return bad("containment value must lie below the statutory band");
                }
                if !(*deadline > 0.0) {
                    return bad("deadline must be positive");
                }
            }
            FreqSpec::Shutdown { lo, hi } if !(lo <= hi) => return bad("shutdown limits reversed"),
            FreqSpec::FfrPrimary { t_inject, t_max, hold, .. } => {
                if [t_inject, t_max, hold].iter().any(|t| !(**t > 0.0)) {
                    return bad("FFR times must be positive");
                }
            }
            FreqSpec::FfrSecondary { t_max, hold, .. } => {
                if !(*t_max > 0.0 && *hold > 0.0) {
                    return bad("secondary response times must be positive");
                }
            }
            FreqSpec::Efr { k, t_respond, hold, .. } => {
                if !(*k > 0.0 && *t_respond > 0.0 && *hold > 0.0) {
                    return bad("EFR constants must be positive");
                }
            }
            FreqSpec::OnChannel { spec, .. } => spec.validate()?,
            FreqSpec::Composite { members, .. } => {
                if members.is_empty() {
                    return bad("composite spec without members");
                }
                for m in members {
                    m.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Result of `shrink_spec`.
#[derive(Debug, Clone, PartialEq)]
pub enum Shrunk {
    Feasible(FreqSpec),
    /// No abstract controller can exist for this margin.
    Infeasible { epsilon: f64, reason: String },
}

impl Shrunk {
    pub fn spec(&self) -> Option<&FreqSpec> {
        match self {
            Shrunk::Feasible(s) => Some(s),
            Shrunk::Infeasible { .. } => None,
        }
    }
}

/// `T̂ = [T_lo+ε, T_hi−ε]`, avoid sets grown by `ε`.
pub fn shrink_spec(spec: &FreqSpec, epsilon: f64) -> Result<Shrunk> {
    let FreqSpec::ReachAvoid { target, safe } = spec else {
        return Err(Error::InvalidArgument("only reach-avoid specs can be shrunk".into()));
    };
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon = {epsilon} must be non-negative")));
    }
    let t = Interval::new(target.lo + epsilon, target.hi - epsilon);
    let b = Interval::new(safe.lo + epsilon, safe.hi - epsilon);
    if t.is_empty() {
        return Ok(Shrunk::Infeasible { epsilon, reason: format!("target narrower than 2*epsilon = {}", 2.0 * epsilon) });
    }
    if b.is_empty() {
        return Ok(Shrunk::Infeasible { epsilon, reason: "safe band vanishes".into() });
    }
    Ok(Shrunk::Feasible(FreqSpec::ReachAvoid { target: t, safe: b }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub satisfied: bool,
    pub first_violation: Option<f64>,
    /// Clause responsible for the verdict.
    pub witness: Option<String>,
    /// Obligations still open at the end of the trace.
    pub pending: Vec<String>,
    /// Every violating sample time of the deciding clause.
    pub violations: Vec<f64>,
}

impl Verdict {
    fn ok() -> Self {
        Verdict { satisfied: true, first_violation: None, witness: None, pending: vec![], violations: vec![] }
    }

    fn vacuous(why: &str) -> Self {
        Verdict { witness: Some(why.to_string()), ..Verdict::ok() }
    }

    fn violated(t: f64, clause: &str) -> Self {
        Verdict {
            satisfied: false,
            first_violation: Some(t),
            witness: Some(clause.to_string()),
            pending: vec![],
            violations: vec![t],
        }
    }

    fn pend(mut self, what: &str) -> Self {
        self.pending.push(what.to_string());
        if self.witness.is_none() {
            self.witness = Some("pending".into());
        }
        self
    }

    /// Satisfied with nothing left open.
    pub fn conclusive(&self) -> bool {
        self.satisfied && self.pending.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorContext {
    /// Size of the infeed loss in MW, if known.
    pub loss_mw: Option<f64>,
    pub f0: f64,
    /// Output channels carry deviations from `f0` rather than absolute Hz.
    pub deviation: bool,
    pub channel: usize,
    /// Input column carrying the response power.
    pub power_channel: Option<usize>,
    /// Multiplies the power column to obtain MW.
    pub power_scale: f64,
    /// Frequency below which a low-frequency event starts; defaults to the
    /// lower statutory limit.
    pub low_threshold: Option<f64>,
}

impl Default for MonitorContext {
    fn default() -> Self {
        MonitorContext {
            loss_mw: None,
            f0: 50.0,
            deviation: true,
            channel: 0,
            power_channel: None,
            power_scale: 1.0,
            low_threshold: None,
        }
    }
}

impl MonitorContext {
    pub fn absolute() -> Self {
        MonitorContext { deviation: false, ..Default::default() }
    }

    fn absolute_freq(&self, trace: &Trace) -> Result<Vec<f64>> {
        let y = trace.output_channel(self.channel)?;
        Ok(if self.deviation { y.iter().map(|v| v + self.f0).collect() } else { y })
    }

    fn deviation_freq(&self, trace: &Trace) -> Result<Vec<f64>> {
        let y = trace.output_channel(self.channel)?;
        Ok(if self.deviation { y } else { y.iter().map(|v| v - self.f0).collect() })
    }

    fn power(&self, trace: &Trace) -> Result<Vec<f64>> {
        let ch = self
            .power_channel
            .ok_or_else(|| Error::MissingChannel("power channel required by this spec".into()))?;
        Ok(trace.input_channel(ch)?.iter().map(|p| p * self.power_scale).collect())
    }
}

const P_TOL: f64 = 1e-6;

fn at_max(p: f64, p_max: f64) -> bool {
    (p.abs() - p_max).abs() <= P_TOL * p_max.abs().max(1.0)
}

/// `a ⇒ □ʰ a` for the "at maximum" predicate, checked on every maximal run.
fn hold_check(t: &[f64], flag: &[bool], hold: f64, clause: &str) -> Verdict {
    let end = *t.last().unwrap();
    let mut k = 0;
    let mut pending = false;
    while k < flag.len() {
        if !flag[k] {
            k += 1;
            continue;
        }
        let start = t[k];
        while k < flag.len() && flag[k] {
            k += 1;
        }
        if k == flag.len() {
            if end - start < hold - 1e-9 {
                pending = true;
            }
        } else if t[k] < start + hold - 1e-9 {
            return Verdict::violated(t[k], clause);
        }
    }
    if pending {
        Verdict::ok().pend(clause)
    } else {
        Verdict::ok()
    }
}

/// `◇ᵈ pred` starting at index `from`.
fn within(t: &[f64], from: usize, deadline: f64, pred: impl Fn(usize) -> bool, clause: &str) -> Verdict {
    let t0 = t[from];
    for k in from..t.len() {
        if t[k] > t0 + deadline + 1e-9 {
            return Verdict::violated(t[k], clause);
        }
        if pred(k) {
            return Verdict::ok();
        }
    }
    Verdict::ok().pend(clause)
}

fn conj(parts: Vec<Verdict>) -> Verdict {
    let mut out = Verdict::ok();
    let mut earliest: Option<Verdict> = None;
    for v in parts {
        out.pending.extend(v.pending.iter().cloned());
        if let Some(tv) = v.first_violation {
            if earliest.as_ref().map_or(true, |e| tv < e.first_violation.unwrap()) {
                earliest = Some(v);
            }
        }
    }
    match earliest {
        Some(mut v) => {
            v.pending = out.pending;
            v
        }
        None => {
            if !out.pending.is_empty() {
                out.witness = Some("pending".into());
            }
            out
        }
    }
}

pub fn monitor(trace: &Trace, spec: &FreqSpec, ctx: &MonitorContext) -> Result<Verdict> {
    spec.validate()?;
    if trace.is_empty() {
        return Err(Error::InvalidArgument("cannot monitor an empty trace".into()));
    }
    let t = &trace.t;
    match spec {
        FreqSpec::ReachAvoid { target, safe } => {
            let y = ctx.deviation_freq(trace)?;
            let bad: Vec<f64> = (0..y.len()).filter(|&k| !safe.contains(y[k])).map(|k| t[k]).collect();
            if let Some(&first) = bad.first() {
                let mut v = Verdict::violated(first, "avoid");
                v.violations = bad;
                return Ok(v);
            }
            if target.contains(*y.last().unwrap()) {
                Ok(Verdict::ok())
            } else if y.iter().any(|v| target.contains(*v)) {
                Ok(Verdict::ok().pend("recurrence: outside target at end"))
            } else {
                Ok(Verdict::ok().pend("reach: target not visited"))
            }
        }
        FreqSpec::StatutoryNormal { statutory, loss_limit } => {
            if matches!(ctx.loss_mw, Some(l) if l > *loss_limit) {
                return Ok(Verdict::vacuous("loss above normal limit"));
            }
            let f = ctx.absolute_freq(trace)?;
            let bad: Vec<f64> = (0..f.len()).filter(|&k| !statutory.contains(f[k])).map(|k| t[k]).collect();
            Ok(match bad.first() {
                Some(&first) => Verdict { violations: bad, ..Verdict::violated(first, "statutory") },
                None => Verdict::ok(),
            })
        }
        FreqSpec::Infrequent { statutory, containment, deadline, loss_limit } => {
            if matches!(ctx.loss_mw, Some(l) if l < *loss_limit) {
                return Ok(Verdict::vacuous("loss below infrequent limit"));
            }
            let f = ctx.absolute_freq(trace)?;
            let Some(ev) = f.iter().position(|v| *v < statutory.lo) else {
                return Ok(Verdict::vacuous("frequency never below statutory"));
            };
            let floor: Vec<f64> = (0..f.len()).filter(|&k| f[k] < *containment).map(|k| t[k]).collect();
            let floor_v = match floor.first() {
                Some(&first) => Verdict { violations: floor, ..Verdict::violated(first, "containment") },
                None => Verdict::ok(),
            };
            let back = within(t, ev, *deadline, |k| statutory.contains(f[k]), "return to statutory");
            Ok(conj(vec![floor_v, back]))
        }
        FreqSpec::Shutdown { lo, hi } => {
            let f = ctx.absolute_freq(trace)?;
            let bad: Vec<f64> = (0..f.len()).filter(|&k| f[k] < *lo || f[k] > *hi).map(|k| t[k]).collect();
            Ok(match bad.first() {
                Some(&first) => Verdict { violations: bad, ..Verdict::violated(first, "shutdown") },
                None => Verdict::ok(),
            })
        }
        FreqSpec::FfrPrimary { t_inject, t_max, hold, p_max } => {
            let f = ctx.absolute_freq(trace)?;
            let p = ctx.power(trace)?;
            let thr = ctx.low_threshold.unwrap_or(49.5);
            let flag: Vec<bool> = p.iter().map(|v| at_max(*v, *p_max)).collect();
            let held = hold_check(t, &flag, *hold, "primary hold");
            let Some(ev) = f.iter().position(|v| *v < thr) else {
                return Ok(conj(vec![Verdict::vacuous("no low frequency event"), held]));
            };
            let inject = within(t, ev, *t_inject, |k| p[k] > 0.0, "primary inject");
            let full = within(t, ev, *t_max, |k| flag[k], "primary maximum");
            Ok(conj(vec![inject, full, held]))
        }
        FreqSpec::FfrSecondary { t_max, hold, p_max } => {
            let f = ctx.absolute_freq(trace)?;
            let p = ctx.power(trace)?;
            let thr = ctx.low_threshold.unwrap_or(49.5);
            let flag: Vec<bool> = p.iter().map(|v| at_max(*v, *p_max)).collect();
            let held = hold_check(t, &flag, *hold, "secondary hold");
            let Some(ev) = f.iter().position(|v| *v < thr) else {
                return Ok(conj(vec![Verdict::vacuous("no low frequency event"), held]));
            };
            let full = within(t, ev, *t_max, |k| flag[k], "secondary maximum");
            Ok(conj(vec![full, held]))
        }
        FreqSpec::Efr { deadband, envelope, k, t_respond, hold, p_max } => {
            let f = ctx.absolute_freq(trace)?;
            let p = ctx.power(trace)?;
            let flag: Vec<bool> = p.iter().map(|v| at_max(*v, *p_max)).collect();
            let mut parts = vec![hold_check(t, &flag, *hold, "efr hold")];
            // every crossing out of the deadband opens a response obligation
            let mut outside_prev = false;
            for i in 0..f.len() {
                let outside = !deadband.contains(f[i]);
                if outside && !outside_prev {
                    parts.push(within(t, i, *t_respond, |j| flag[j], "efr respond"));
                }
                outside_prev = outside;
            }
            let mut ramp_bad = Vec::new();
            for i in 0..f.len().saturating_sub(1) {
                if deadband.contains(f[i]) || !envelope.contains(f[i]) {
                    continue;
                }
                let dt = t[i + 1] - t[i];
                let dfdt = (f[i + 1] - f[i]) / dt;
                let dpdt = (p[i + 1] - p[i]) / dt;
                let lo = p_max * (-dfdt / k - 0.01);
                let hi = p_max * (-dfdt / k + 0.01);
                if !(lo < dpdt && dpdt < hi) {
                    ramp_bad.push(t[i]);
                }
            }
            if let Some(&first) = ramp_bad.first() {
                parts.push(Verdict { violations: ramp_bad, ..Verdict::violated(first, "efr ramp") });
            }
            Ok(conj(parts))
        }
        FreqSpec::OnChannel { channel, spec } => {
            let sub = MonitorContext { channel: *channel, ..ctx.clone() };
            monitor(trace, spec, &sub)
        }
        FreqSpec::Composite { mode, members } => {
            let vs = members.iter().map(|m| monitor(trace, m, ctx)).collect::<Result<Vec<_>>>()?;
            Ok(combine(*mode, vs))
        }
    }
}

fn label(i: usize, v: Verdict) -> Verdict {
    let tag = |s: &str| format!("member {}: {s}", i + 1);
    Verdict {
        witness: v.witness.as_deref().map(tag),
        pending: v.pending.iter().map(|p| tag(p)).collect(),
        ..v
    }
}

fn combine(mode: Mode, vs: Vec<Verdict>) -> Verdict {
    let vs: Vec<Verdict> = vs.into_iter().enumerate().map(|(i, v)| label(i, v)).collect();
    match mode {
        Mode::Conjunction => conj(vs),
        Mode::Disjunction => {
            if let Some(best) = vs.iter().filter(|v| v.satisfied).min_by_key(|v| v.pending.len()) {
                return best.clone();
            }
            // falsified once the last member has failed
            vs.into_iter()
                .max_by(|a, b| a.first_violation.unwrap().total_cmp(&b.first_violation.unwrap()))
                .unwrap_or_else(Verdict::ok)
        }
    }
}

/// Composite of several specs.
pub fn compose_specs(specs: Vec<FreqSpec>, mode: Mode) -> Result<FreqSpec> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("compose_specs needs at least one spec".into()));
    }
    Ok(FreqSpec::Composite { mode, members: specs })
}

/// Conjunction over separate traces, one spec per trace.
pub fn monitor_all(items: &[(&Trace, &FreqSpec, &MonitorContext)]) -> Result<Verdict> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to monitor".into()));
    }
    let vs = items.iter().map(|(t, s, c)| monitor(t, s, c)).collect::<Result<Vec<_>>>()?;
    Ok(combine(Mode::Conjunction, vs))
}

/// Derivative by central differences, one-sided at the ends.
pub fn rocof(t: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    if t.len() != f.len() {
        return Err(Error::Dimension("rocof: time and value lengths differ".into()));
    }
    let n = t.len();
    if n < 2 {
        return Err(Error::InvalidArgument("rocof needs at least two samples".into()));
    }
    Ok((0..n)
        .map(|k| {
            let (a, b) = if k == 0 {
                (0, 1)
            } else if k == n - 1 {
                (n - 2, n - 1)
            } else {
                (k - 1, k + 1)
            };
            (f[b] - f[a]) / (t[b] - t[a])
        })
        .collect())
}

pub fn rocof_trace(trace: &Trace, channel: usize) -> Result<Vec<f64>> {
    rocof(&trace.t, &trace.output_channel(channel)?)
}

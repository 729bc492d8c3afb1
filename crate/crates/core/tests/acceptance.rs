//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsfkit::contracts::{run_scenario, worst_case_internal, Contract, ScenarioConfig};
use rsfkit::models::{simulate, Signal, SystemModel, Trace};
use rsfkit::nets_data;
use rsfkit::numerics::{Mat, Vector};
use rsfkit::rsf::{
    check_rsf_conditions_along_trace, construct_abstraction, decay_chain, epsilon_bound, eval_v, simulate_pair, Abstraction,
    EpsilonQuery, PipelineOptions,
};
use rsfkit::specs::{monitor, shrink_spec, FreqSpec, Interval, MonitorContext, Shrunk};
use rsfkit::symbolic::{
    build_abstraction, cells_for_spec, closed_loop, control_lookup, synthesize_recurrence, GridAbstraction, Policy,
    SymbolicController, TransitionRelation,
};

const EPS_AREA1: (f64, f64) = (0.1019, 0.02);
const EPS_COMPOSITIONAL: (f64, f64) = (0.1992, 0.03);
const EPS_SINGLE_AREA: (f64, f64) = (0.1016, 0.02);
const OPEN_LOOP_MIN: (f64, f64) = (-0.6872, 0.05);
const FAST_S: f64 = 1.0;
const RUN_S: f64 = 5.0;
const SYNTH_S: f64 = 600.0;
const ORACLE_S: f64 = 60.0;
const PAIRS_S: f64 = 120.0;
const SCENARIO_S: f64 = 30.0;
const DECAY_SLACK: f64 = 1e-4;

type Res<T> = std::result::Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn within(x: f64, (centre, tol): (f64, f64)) -> bool {
    (x - centre).abs() <= tol
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Res<Outcome>) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(Ok(o)) => (o.pass, o.detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".to_string()),
    };
    println!("{} {id:>2} {name}: {detail} [{secs:.2} s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn area1_epsilon() -> Res<Outcome> {
    let (m1, m2, cert) = (nets_data::area1_nonlinear()?, nets_data::area1_nonlinear_reduced()?, nets_data::area1_nonlinear_cert()?);
    let q = nets_data::constants()?.query("area1")?;
    let (eps, secs) = timed(|| epsilon_bound(&cert, &m1, &m2, &q));
    let eps = eps?;
    outcome(
        within(eps, EPS_AREA1) && secs < FAST_S,
        format!("epsilon = {eps:.6}, expected {} +/- {}", EPS_AREA1.0, EPS_AREA1.1),
    )
}

/// Internal-disturbance boxes of the compositional setup: neighbours are
/// assumed to stay inside the global safe band.
fn compositional_boxes(area: usize) -> Res<Vec<Interval>> {
    let cfg = nets_data::scenario("compositional")?;
    let map = nets_data::extraction()?;
    let FreqSpec::ReachAvoid { safe: gsafe, .. } = cfg.global.resolve()? else {
        return Err("global spec is not reach-avoid".into());
    };
    let mut contracts = Vec::new();
    for a in &cfg.areas {
        let mut c = Contract::area(a.id, a.disturbance.abs(), a.spec.resolve()?);
        let assumed = a.assume.unwrap_or(gsafe);
        c.internal = map.area(a.id)?.neighbors.iter().map(|j| (format!("f{j}"), assumed)).collect();
        contracts.push(c);
    }
    let boxes = worst_case_internal(&contracts, &nets_data::coupling_matrix(&map)?)?;
    let i = cfg.areas.iter().position(|a| a.id == area).ok_or("area missing from the scenario")?;
    Ok(boxes[i].clone())
}

fn area3_epsilons() -> Res<Outcome> {
    let full = nets_data::full_network()?;
    let map = nets_data::extraction()?;
    let q = nets_data::constants()?.query("compositional")?;

    let (res, secs) = timed(|| -> Res<(f64, f64)> {
        let m1 = nets_data::extract_area(&full, &map, 3)?;
        let ab = construct_abstraction(&m1, &PipelineOptions::default())?;
        let boxes = compositional_boxes(3)?;
        let d_max = std::iter::once(q.d_max).chain(boxes.iter().map(|b| b.mag())).map(|x| x * x).sum::<f64>().sqrt();
        let comp = epsilon_bound(&ab.cert, &m1, &ab.m2, &EpsilonQuery { d_max, u2_max: q.u2_max, ..Default::default() })?;
        let iso = nets_data::isolated_area(&full, &map, 3)?;
        let ab = construct_abstraction(&iso, &PipelineOptions::default())?;
        let single = epsilon_bound(&ab.cert, &iso, &ab.m2, &nets_data::constants()?.query("area1")?)?;
        Ok((comp, single))
    });
    let (comp, single) = res?;
    outcome(
        within(comp, EPS_COMPOSITIONAL) && within(single, EPS_SINGLE_AREA) && secs < 2.0 * FAST_S,
        format!(
            "compositional epsilon = {comp:.6} (expected {} +/- {}), single-area epsilon = {single:.6} (expected {} +/- {})",
            EPS_COMPOSITIONAL.0, EPS_COMPOSITIONAL.1, EPS_SINGLE_AREA.0, EPS_SINGLE_AREA.1
        ),
    )
}

fn open_loop() -> Res<Outcome> {
    let m = nets_data::area1_nonlinear()?;
    let (tr, secs) = timed(|| {
        simulate(&m, &Vector::zeros(m.n()), &Signal::zeros(1), &Signal::constant(&[1.0]), &Signal::zeros(m.r()), 6.0, 0.005)
    });
    let y = tr?.output_channel(0)?;
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        within(min, OPEN_LOOP_MIN) && secs < FAST_S,
        format!("min deviation = {min:.4} Hz, expected {} +/- {}", OPEN_LOOP_MIN.0, OPEN_LOOP_MIN.1),
    )
}

struct Area1 {
    m1: SystemModel,
    ab: Abstraction,
    eps: f64,
    spec: FreqSpec,
    ctrl: SymbolicController,
}

fn area1_synthesis(slot: &mut Option<Area1>) -> Res<Outcome> {
    let m1 = nets_data::area1_nonlinear()?;
    let ab = construct_abstraction(&m1, &PipelineOptions::default())?;
    let q = nets_data::constants()?.query("area1")?;
    let eps = epsilon_bound(&ab.cert, &m1, &ab.m2, &q)?;
    let spec = nets_data::spec("area1")?;
    let Shrunk::Feasible(hat) = shrink_spec(&spec, eps)? else {
        return outcome(false, format!("spec shrunk by {eps:.4} is empty"));
    };
    let mut grid = GridAbstraction::from_spec(&nets_data::grid()?, q.u2_max, vec![Interval::point(q.d_max)])?;
    if let FreqSpec::ReachAvoid { safe, .. } = &hat {
        grid.output_band = Some(*safe);
    }
    let (syn, secs) = timed(|| -> Res<_> {
        let rel = build_abstraction(&ab.m2, &grid)?;
        let c_row: Vec<f64> = ab.m2.c.row(0).iter().copied().collect();
        let (target, avoid) = cells_for_spec(&grid, &c_row, &hat)?;
        Ok(synthesize_recurrence(&rel, &target, &avoid)?)
    });
    let syn = syn?;
    let origin = control_lookup(&syn.controller, &vec![0.0; ab.m2.n()]).is_ok();
    let (x1, x2) = (Vector::zeros(m1.n()), Vector::zeros(ab.m2.n()));
    let cl = closed_loop(
        &m1,
        &ab.m2,
        &ab.cert,
        Policy::Controller(&syn.controller),
        &Signal::constant(&[q.d_max]),
        &x1,
        &x2,
        20.0,
        0.005,
        grid.tau,
        Some(&spec),
    )?;
    let sat = cl.report.concrete.as_ref().is_some_and(|v| v.conclusive());
    let detail = format!(
        "{} cells, {} winning, origin winning = {origin}, concrete run satisfies the spec = {sat}, synthesis {secs:.1} s",
        grid.cell_count(),
        syn.winning_count()
    );
    let pass = !syn.is_empty() && origin && sat && secs < SYNTH_S;
    *slot = Some(Area1 { m1, ab, eps, spec, ctrl: syn.controller });
    outcome(pass, detail)
}

fn area1_closed_loop(setup: &Option<Area1>) -> Res<Outcome> {
    let Some(s) = setup else {
        return outcome(false, "no controller: synthesis did not complete");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let winning: Vec<usize> = (0..s.ctrl.winning.len()).filter(|c| s.ctrl.winning[*c]).collect();
    let mut starts = vec![vec![0.0; s.ab.m2.n()]];
    for _ in 0..4 {
        starts.push(s.ctrl.grid.cell_center(winning[rng.gen_range(0..winning.len())]));
    }
    let (mut worst, mut slowest, mut lookups, mut bound) = (0.0f64, 0.0f64, 0usize, 0usize);
    for x2 in &starts {
        let x2 = Vector::from_row_slice(x2);
        let x1 = &s.ab.cert.p * &x2;
        let (cl, secs) = timed(|| {
            closed_loop(
                &s.m1,
                &s.ab.m2,
                &s.ab.cert,
                Policy::Controller(&s.ctrl),
                &Signal::constant(&[1.0]),
                &x1,
                &x2,
                20.0,
                0.005,
                s.ctrl.grid.tau,
                Some(&s.spec),
            )
        });
        let cl = cl?;
        let rep = check_rsf_conditions_along_trace(&s.ab.cert, &s.m1, &s.ab.m2, &cl.trace1, &cl.trace2)?;
        worst = worst.max(cl.report.max_mismatch);
        slowest = slowest.max(secs);
        lookups += cl.report.soundness_violations.len();
        bound += rep.error_bound_violations.len();
    }
    outcome(
        worst <= s.eps && lookups == 0 && bound == 0 && slowest < RUN_S,
        format!(
            "{} runs, max |y1 - y2| = {worst:.4} <= epsilon = {:.4}, {lookups} lookup failures, {bound} bound violations, slowest run {slowest:.2} s",
            starts.len(),
            s.eps
        ),
    )
}

/// Recurrence game solved on explicit successor lists with a
/// predecessor-counting attractor.
fn exhaustive_recurrence(rel: &TransitionRelation, target: &[bool], avoid: &[bool]) -> Vec<bool> {
    let n = rel.n_cells();
    let mut edges: Vec<(usize, Vec<usize>)> = Vec::new();
    for c in 0..n {
        for j in 0..rel.n_inputs {
            if rel.is_valid(c, j) {
                edges.push((c, rel.successors(c, j)));
            }
        }
    }
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, (_, succ)) in edges.iter().enumerate() {
        for &s in succ {
            preds[s].push(e);
        }
    }
    let mut z: Vec<bool> = avoid.iter().map(|a| !a).collect();
    loop {
        let mut y = vec![false; n];
        let mut queue = VecDeque::new();
        for (c, succ) in &edges {
            if target[*c] && z[*c] && !y[*c] && succ.iter().all(|s| z[*s]) {
                y[*c] = true;
                queue.push_back(*c);
            }
        }
        let mut missing: Vec<usize> = edges.iter().map(|(_, s)| s.len()).collect();
        for (e, (c, _)) in edges.iter().enumerate() {
            if missing[e] == 0 && !avoid[*c] && !y[*c] {
                y[*c] = true;
                queue.push_back(*c);
            }
        }
        while let Some(s) = queue.pop_front() {
            for &e in &preds[s] {
                missing[e] -= 1;
                let c = edges[e].0;
                if missing[e] == 0 && !avoid[c] && !y[c] {
                    y[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if y == z {
            return z;
        }
        z = y;
    }
}

fn random_grid_game(rng: &mut ChaCha8Rng) -> Res<Option<(TransitionRelation, Vec<bool>, Vec<bool>)>> {
    let dim = if rng.gen_bool(0.5) { 2 } else { 3 };
    let a = Mat::from_fn(dim, dim, |i, j| if i == j { rng.gen_range(-2.0..0.5) } else { rng.gen_range(-1.0..1.0) });
    let b = Mat::from_fn(dim, 1, |_, _| rng.gen_range(-1.0..1.0));
    let c = Mat::from_fn(1, dim, |_, _| rng.gen_range(-1.0..1.0));
    let g = Mat::from_fn(dim, 1, |_, _| rng.gen_range(-0.3..0.3));
    let m = SystemModel::linear(a, b, c.clone(), g)?;
    let eta = if dim == 2 { 0.1 } else { 0.25 };
    let inputs: Vec<Vec<f64>> = (0..rng.gen_range(2..5)).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
    let grid = GridAbstraction::new(
        vec![-1.0; dim],
        vec![1.0; dim],
        vec![eta; dim],
        inputs,
        rng.gen_range(0.1..0.4),
        vec![Interval::new(-0.2, 0.2)],
    )?;
    let Ok(rel) = build_abstraction(&m, &grid) else { return Ok(None) };
    let w = rng.gen_range(0.1..0.5);
    let spec = FreqSpec::reach_avoid(Interval::new(-w, w), Interval::new(-1.2, 1.2));
    let c_row: Vec<f64> = c.row(0).iter().copied().collect();
    let (t, av) = cells_for_spec(&grid, &c_row, &spec)?;
    Ok(Some((rel, t, av)))
}

fn oracle_equivalence() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut agree, mut attempts, mut largest, mut nonempty) = (0, 0, 0, 0, 0);
    while checked < 20 && attempts < 500 {
        attempts += 1;
        let Some((rel, t, av)) = random_grid_game(&mut rng)? else { continue };
        largest = largest.max(rel.n_cells());
        let syn = synthesize_recurrence(&rel, &t, &av)?;
        let oracle = exhaustive_recurrence(&rel, &t, &av);
        checked += 1;
        nonempty += usize::from(oracle.iter().any(|w| *w));
        agree += usize::from(syn.controller.winning == oracle);
    }
    outcome(
        checked == 20 && agree == 20 && largest <= 1000 && start.elapsed().as_secs_f64() < ORACLE_S,
        format!("{agree}/{checked} systems agree exactly ({nonempty} with non-empty winning sets, grids up to {largest} cells)"),
    )
}

fn random_stable_model(rng: &mut ChaCha8Rng) -> Res<SystemModel> {
    let n = rng.gen_range(3..=5);
    let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let s = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let a = -(Mat::identity(n, n) * rng.gen_range(0.2..1.0) + &g * g.transpose()) + (&s - s.transpose());
    let b = Mat::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
    let c = Mat::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
    let e = Mat::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
    Ok(SystemModel::linear(a, b, c, e)?)
}

/// Sinusoidal disturbance of unit amplitude and a random piecewise-constant
/// abstract input bounded by 0.5.
fn random_pair_run(rng: &mut ChaCha8Rng, m1: &SystemModel, ab: &Abstraction) -> Res<(Trace, Trace)> {
    let (w, ph) = (rng.gen_range(0.5..3.0), rng.gen_range(0.0..6.0));
    let d = Signal::Func(Arc::new(move |t, _| Vector::from_element(1, (w * t + ph).sin())));
    let us: Vec<f64> = (0..50).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut pol = |k: usize, _: f64, _: &Vector| Ok(Vector::from_element(1, us[(k / 10) % us.len()]));
    let x1 = Vector::zeros(m1.n());
    let x2 = Vector::zeros(ab.m2.n());
    Ok(simulate_pair(&ab.cert, m1, &ab.m2, &x1, &x2, &d, &mut pol, 5.0, 0.01)?)
}

fn random_pairs() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bound, mut decay, mut built) = (0, 0, 0);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let m1 = random_stable_model(&mut rng)?;
        let order = rng.gen_range(1..m1.n());
        let ab = match construct_abstraction(&m1, &PipelineOptions { order, ..Default::default() }) {
            Ok(ab) => ab,
            Err(e) => {
                failures.push(format!("pair {trial}: {e}"));
                continue;
            }
        };
        built += 1;
        let (t1, t2) = random_pair_run(&mut rng, &m1, &ab)?;
        let rep = check_rsf_conditions_along_trace(&ab.cert, &m1, &ab.m2, &t1, &t2)?;
        bound += rep.error_bound_violations.len();
        decay += rep.decay_violations.len();
    }
    let mut detail = format!("{built}/100 certificates built, {bound} error-bound and {decay} decay violations");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first failure {f}"));
    }
    outcome(built == 100 && bound == 0 && decay == 0 && start.elapsed().as_secs_f64() < PAIRS_S, detail)
}

fn scenario(name: &str, f: impl FnOnce(&mut ScenarioConfig)) -> Res<ScenarioConfig> {
    let mut cfg = nets_data::scenario(name)?;
    f(&mut cfg);
    Ok(cfg)
}

fn scenarios() -> Res<Outcome> {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut slowest = 0.0f64;

    let mut step = |label: &str, cfg: ScenarioConfig, check: &dyn Fn(&rsfkit::contracts::ScenarioReport) -> bool| {
        let (rep, secs) = timed(|| run_scenario(&cfg));
        slowest = slowest.max(secs);
        match rep {
            Ok(r) => {
                let ok = check(&r) && secs < SCENARIO_S;
                pass &= ok;
                notes.push(format!("{label} {}", if ok { "ok" } else { "not met" }));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{label} failed ({e})"));
            }
        }
    };
    let violated = |r: &rsfkit::contracts::ScenarioReport, id: usize| r.areas.iter().any(|a| a.id == id && !a.verdict.satisfied);
    step("isolated/off", scenario("isolated", |c| c.controllers = false)?, &|r| r.areas.iter().any(|a| !a.verdict.satisfied));
    step("isolated/on", scenario("isolated", |_| {})?, &|r| {
        r.areas.iter().all(|a| a.verdict.satisfied) && r.refines_global == Some(true)
    });
    step("compositional/off", scenario("compositional", |c| c.controllers = false)?, &|r| violated(r, 3));
    step("compositional/on", scenario("compositional", |_| {})?, &|r| r.global_verdict.satisfied);
    outcome(pass, format!("{}; slowest {slowest:.1} s", notes.join(", ")))
}

struct MonitorCase {
    name: &'static str,
    spec: FreqSpec,
    ctx: MonitorContext,
    trace: Trace,
    satisfied: bool,
    witness: Option<&'static str>,
}

fn trace_of(dt: f64, f: &[f64], p: Option<&[f64]>) -> Trace {
    let mut tr = Trace { dt, ..Default::default() };
    for (k, v) in f.iter().enumerate() {
        tr.t.push(k as f64 * dt);
        tr.x.push(Vector::zeros(0));
        tr.y.push(Vector::from_element(1, *v));
        tr.u.push(Vector::from_element(1, p.map_or(0.0, |p| p[k])));
        tr.v.push(Vector::zeros(0));
        tr.w.push(Vector::zeros(0));
    }
    tr
}

fn sample(horizon: f64, dt: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = (horizon / dt).round() as usize;
    (0..=n).map(|k| f(k as f64 * dt)).collect()
}

fn monitor_cases() -> Res<Vec<MonitorCase>> {
    let c = nets_data::constants()?;
    let abs = MonitorContext::absolute;
    let pw = || MonitorContext { power_channel: Some(0), ..MonitorContext::absolute() };
    let normal = MonitorContext { loss_mw: Some(c.normal_loss_mw - 20.0), ..abs() };
    let large = MonitorContext { loss_mw: Some(c.normal_loss_mw + 180.0), ..abs() };
    let case = |name, spec, ctx, trace, satisfied, witness| MonitorCase { name, spec, ctx, trace, satisfied, witness };
    let low = |horizon: f64, dt: f64, level: f64| sample(horizon, dt, move |t| if t < 1.0 { 50.0 } else { level });
    let p_max = 5.0;
    let mut cases = vec![
        case("S holds", FreqSpec::statutory_normal(&c), normal.clone(), trace_of(0.1, &[50.0, 49.6, 50.4, 50.0], None), true, None),
        case("S left", FreqSpec::statutory_normal(&c), normal.clone(), trace_of(0.1, &[50.0, 49.49, 50.0], None), false, Some("statutory")),
        case("S above", FreqSpec::statutory_normal(&c), normal, trace_of(0.1, &[50.0, 50.51], None), false, Some("statutory")),
        case("S beyond L", FreqSpec::statutory_normal(&c), large.clone(), trace_of(0.1, &[50.0, 49.0], None), true, None),
        case("Z held, back in 45 s", FreqSpec::infrequent(&c), large.clone(), trace_of(0.5, &sample(70.0, 0.5, |t| if t < 1.0 { 50.0 } else if t < 45.0 { 49.21 } else { 49.6 }), None), true, None),
        case("Z breached", FreqSpec::infrequent(&c), large.clone(), trace_of(0.5, &low(20.0, 0.5, 49.19), None), false, Some("containment")),
        case("60 s deadline missed", FreqSpec::infrequent(&c), large, trace_of(0.5, &sample(70.0, 0.5, |t| if t < 1.0 { 50.0 } else if t < 62.0 { 49.3 } else { 49.6 }), None), false, Some("return to statutory")),
        case("shutdown low", FreqSpec::shutdown(&c), abs(), trace_of(0.5, &[50.0, 47.0, 46.99], None), false, Some("shutdown")),
        case("shutdown high", FreqSpec::shutdown(&c), abs(), trace_of(0.5, &[50.0, 52.01], None), false, Some("shutdown")),
        case("shutdown edges", FreqSpec::shutdown(&c), abs(), trace_of(0.5, &[47.0, 52.0, 50.0], None), true, None),
    ];
    let f = low(60.0, 0.1, 49.4);
    let ffr = |inject: f64, full: f64, stop: f64| sample(60.0, 0.1, move |t| if t < inject { 0.0 } else if t < full { 2.0 } else if t < stop { p_max } else { 1.0 });
    cases.extend([
        case("FFR in 2/10/30 s", FreqSpec::ffr_primary(&c, p_max), pw(), trace_of(0.1, &f, Some(&ffr(2.5, 10.5, 41.0))), true, None),
        case("FFR inject late", FreqSpec::ffr_primary(&c, p_max), pw(), trace_of(0.1, &f, Some(&ffr(3.5, 9.0, 50.0))), false, Some("primary inject")),
        case("FFR maximum late", FreqSpec::ffr_primary(&c, p_max), pw(), trace_of(0.1, &f, Some(&ffr(2.0, 11.5, 50.0))), false, Some("primary maximum")),
        case("FFR hold short", FreqSpec::ffr_primary(&c, p_max), pw(), trace_of(0.1, &f, Some(&ffr(2.0, 9.0, 38.0))), false, Some("primary hold")),
    ]);
    let f = low(120.0, 0.5, 49.4);
    let sec = |start: f64, stop: f64| sample(120.0, 0.5, move |t| if t >= start && t < stop { p_max } else { 0.0 });
    cases.extend([
        case("secondary within 30 s", FreqSpec::ffr_secondary(&c, p_max), pw(), trace_of(0.5, &f, Some(&sec(30.0, 1e9))), true, None),
        case("secondary late", FreqSpec::ffr_secondary(&c, p_max), pw(), trace_of(0.5, &f, Some(&sec(32.0, 1e9))), false, Some("secondary maximum")),
        case("secondary hold short of 1800 s", FreqSpec::ffr_secondary(&c, p_max), pw(), trace_of(0.5, &f, Some(&sec(20.0, 100.0))), false, Some("secondary hold")),
    ]);
    for (wide, inside, outside) in [(true, 49.96, 49.94), (false, 49.99, 49.98)] {
        let spec = FreqSpec::efr(&c, wide, 10.0);
        let quiet = sample(5.0, 0.1, |_| inside);
        let name_in = if wide { "EFR wide deadband quiet" } else { "EFR narrow deadband quiet" };
        cases.push(case(name_in, spec.clone(), pw(), trace_of(0.1, &quiet, Some(&vec![0.0; quiet.len()])), true, None));
        let f = sample(5.0, 0.1, |t| if t < 1.0 { 50.0 } else { outside });
        let slow = sample(5.0, 0.1, |t| if t < 2.5 { 0.0 } else { 10.0 });
        let name_out = if wide { "EFR wide no response" } else { "EFR narrow no response" };
        cases.push(case(name_out, spec.clone(), pw(), trace_of(0.1, &f, Some(&slow)), false, None));
        // frequency falling at 0.01 Hz/s: ramp at 10·0.01/k is inside the band, twice that is not
        let k = if wide { c.efr_k_wide } else { c.efr_k_narrow };
        let f = sample(2.0, 0.1, |t| 49.9 - 0.01 * t);
        let rate = 10.0 * 0.01 / k;
        let ramp = |gain: f64| -> Vec<f64> { (0..f.len()).map(|i| 10.0 - gain * rate * (2.0 - i as f64 * 0.1)).collect() };
        let (good, steep) = (ramp(1.0), ramp(2.0));
        // the ramp itself is fine; full power only comes after 2 s, so the
        // earliest violation is the 1 s response deadline
        let name = if wide { "EFR wide ramp in band, slow to full power" } else { "EFR narrow ramp in band, slow to full power" };
        cases.push(case(name, spec.clone(), pw(), trace_of(0.1, &f, Some(&good)), false, Some("efr respond")));
        cases.push(case(if wide { "EFR wide ramp too steep" } else { "EFR narrow ramp too steep" }, spec, pw(), trace_of(0.1, &f, Some(&steep)), false, Some("efr ramp")));
    }
    Ok(cases)
}

fn monitor_suite() -> Res<Outcome> {
    let cases = monitor_cases()?;
    let mut wrong = Vec::new();
    for case in &cases {
        let v = monitor(&case.trace, &case.spec, &case.ctx)?;
        let witness_ok = case.witness.is_none_or(|w| v.witness.as_deref() == Some(w));
        if v.satisfied != case.satisfied || !witness_ok {
            wrong.push(format!("{} (got satisfied = {}, witness {:?})", case.name, v.satisfied, v.witness));
        }
    }
    let agree = cases.len() - wrong.len();
    let mut detail = format!("{agree}/{} verdicts agree", cases.len());
    if !wrong.is_empty() {
        detail.push_str(&format!("; disagreements: {}", wrong.join(", ")));
    }
    outcome(wrong.is_empty(), detail)
}

/// Derivative chain and `V <= epsilon` along runs of the Area 1 pair and of
/// random linear pairs.
fn proof_invariants() -> Res<Outcome> {
    let mut runs: Vec<(SystemModel, Abstraction, Trace, Trace)> = Vec::new();
    let m1 = nets_data::area1_nonlinear()?;
    let ab = construct_abstraction(&m1, &PipelineOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for amp in [1.0, 0.5] {
        let (w, ph) = (rng.gen_range(0.3..2.0), rng.gen_range(0.0..6.0));
        let d = Signal::Func(Arc::new(move |t, _| Vector::from_element(1, amp * (w * t + ph).sin().abs())));
        let us: Vec<f64> = (0..40).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut pol = |k: usize, _: f64, _: &Vector| Ok(Vector::from_element(1, us[(k / 100) % us.len()]));
        let (t1, t2) = simulate_pair(&ab.cert, &m1, &ab.m2, &Vector::zeros(m1.n()), &Vector::zeros(ab.m2.n()), &d, &mut pol, 10.0, 0.005)?;
        runs.push((m1.clone(), ab.clone(), t1, t2));
    }
    for _ in 0..10 {
        let m = random_stable_model(&mut rng)?;
        let order = rng.gen_range(1..m.n());
        let ab = construct_abstraction(&m, &PipelineOptions { order, ..Default::default() })?;
        let (t1, t2) = random_pair_run(&mut rng, &m, &ab)?;
        runs.push((m, ab, t1, t2));
    }
    let (mut samples, mut chain_bad, mut v_bad, mut worst_ratio) = (0usize, 0usize, 0usize, 0.0f64);
    for (m1, ab, t1, t2) in &runs {
        let d_max = (0..t1.len()).map(|k| (t1.v[k].norm_squared() + t1.w[k].norm_squared()).sqrt()).fold(0.0, f64::max);
        let u_max = t2.u.iter().map(|u| u.norm()).fold(0.0, f64::max);
        let eps = epsilon_bound(&ab.cert, m1, &ab.m2, &EpsilonQuery { d_max, u2_max: u_max, ..Default::default() })?;
        for k in 0..t1.len() {
            let mut d = Vector::zeros(t1.v[k].len() + t1.w[k].len());
            d.rows_mut(0, t1.v[k].len()).copy_from(&t1.v[k]);
            d.rows_mut(t1.v[k].len(), t1.w[k].len()).copy_from(&t1.w[k]);
            let s = decay_chain(&ab.cert, m1, &ab.m2, &t1.x[k], &t2.x[k], &d, &t2.u[k])?;
            samples += 1;
            if !s.holds(DECAY_SLACK) {
                chain_bad += 1;
            }
            let v = eval_v(&ab.cert, &t1.x[k], &t2.x[k]);
            if eps > 0.0 {
                worst_ratio = worst_ratio.max(v / eps);
            }
            if v > eps + 1e-9 {
                v_bad += 1;
            }
        }
    }
    outcome(
        chain_bad == 0 && v_bad == 0,
        format!(
            "{} runs, {samples} samples: chain fails at {chain_bad}, V > epsilon at {v_bad} (max V/epsilon = {worst_ratio:.3})",
            runs.len()
        ),
    )
}

fn main() {
    println!("acceptance suite");
    let mut results = Vec::new();
    results.push(run(1, "epsilon, bundled Area 1 pair", area1_epsilon));
    results.push(run(2, "epsilon, Area 3 compositional and single-area", area3_epsilons));
    results.push(run(3, "open-loop excursion, Area 1", open_loop));
    let mut setup = None;
    let synth = {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| area1_synthesis(&mut setup)));
        (res, start.elapsed().as_secs_f64())
    };
    results.push(run(4, "closed-loop error bound, Area 1", || area1_closed_loop(&setup)));
    results.push(run(5, "symbolic synthesis, Area 1 grid", || match synth.0 {
        Ok(r) => r.map(|o| Outcome { detail: format!("{} (total {:.1} s)", o.detail, synth.1), ..o }),
        Err(_) => outcome(false, "panicked"),
    }));
    results.push(run(6, "synthesis against an exhaustive game solver", oracle_equivalence));
    results.push(run(7, "random certified pairs", random_pairs));
    results.push(run(8, "three-area scenarios", scenarios));
    results.push(run(9, "monitor constant table", monitor_suite));
    results.push(run(10, "decay chain and V <= epsilon along runs", proof_invariants));
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

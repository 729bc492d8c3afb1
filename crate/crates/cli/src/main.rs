use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rsfkit::contracts::{run_scenario, ScenarioConfig};
use rsfkit::export::{export_plotdata, Series};
use rsfkit::models::{load_model, LoadedModel, Signal, SystemModel, Trace};
use rsfkit::numerics::{self, Complex64};
use rsfkit::rsf::{self, EpsilonQuery, FixedGains, PipelineOptions, RsfCertificate};
use rsfkit::specs::{monitor, shrink_spec, FreqSpec, Interval, MonitorContext, Shrunk};
use rsfkit::symbolic::{self, GridAbstraction, GridSpec, Policy, SymbolicController};
use rsfkit::{nets_data, Vector};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] rsfkit::Error),
    /// Verification or synthesis came out negative.
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn code(&self) -> u8 {
        use rsfkit::Error as E;
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Io(_)
                | E::Csv(_)
                | E::Parse { .. }
                | E::InvalidArgument(_)
                | E::Dimension(_)
                | E::InvalidModel(_)
                | E::InvalidCertificate(_)
                | E::MissingChannel(_) => 2,
                _ => 1,
            },
        }
    }
}

type Res<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "rsfkit", version, about = "Certified reduced-order abstractions and symbolic frequency control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Balanced truncation of a model.
    Reduce {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the projection P (full <- reduced) as CSV.
        #[arg(long)]
        proj: Option<PathBuf>,
    },
    /// Certificate checks and construction.
    Rsf {
        #[command(subcommand)]
        cmd: RsfCmd,
    },
    /// Symbolic controller synthesis on a reduced model.
    Synth(SynthArgs),
    /// Run a certified pair under a controller (or with u2 = 0).
    Closedloop(ClosedLoopArgs),
    /// Check a trace CSV against a spec.
    Monitor {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        spec: String,
        /// Size of the infeed loss in MW.
        #[arg(long)]
        loss: Option<f64>,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Output values are absolute Hz. Detected automatically when every
        /// sample exceeds 30.
        #[arg(long)]
        absolute: bool,
        #[arg(long)]
        power_channel: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        power_scale: f64,
    },
    /// Multi-area scenarios.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Plot-ready CSV panels from a scenario report directory or a trace.
    Export {
        /// Directory written by `scenario run`.
        #[arg(long, conflicts_with = "trace")]
        report: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, default_value = "trace")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RsfCmd {
    /// LMI margins and equality residuals of a certificate.
    Verify {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        json: bool,
    },
    /// Build a certificate. With --m2 and --proj the given projection is
    /// used; otherwise the model is reduced first.
    Construct {
        #[arg(long)]
        m1: String,
        #[arg(long, requires = "proj")]
        m2: Option<String>,
        #[arg(long, requires = "m2")]
        proj: Option<PathBuf>,
        #[arg(long, default_value_t = 1.7)]
        lambda: f64,
        /// Closed-loop pole targets, e.g. "-2.7,-2.7,-0.5+3i,-0.5-3i".
        #[arg(long, allow_hyphen_values = true)]
        poles: Option<String>,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the abstraction when it is built here.
        #[arg(long)]
        reduced_out: Option<PathBuf>,
    },
    /// Error bound for given disturbance and input magnitudes.
    Epsilon {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 1.0)]
        dmax: f64,
        #[arg(long, default_value_t = 0.5)]
        u2max: f64,
        #[arg(long)]
        json: bool,
    },
}

/// Concrete model, abstraction and certificate. Each defaults to the bundled
/// nonlinear Area 1 artifact; bundled names are accepted in place of paths.
#[derive(Args)]
struct PairArgs {
    #[arg(long, default_value = "area1_nonlinear")]
    m1: String,
    #[arg(long, default_value = "area1_nonlinear_reduced")]
    m2: String,
    #[arg(long, default_value = "area1_nonlinear_cert")]
    cert: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: String,
    /// Grid spec JSON; the bundled grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    u2max: f64,
    /// Disturbance box per channel, `x` or `lo:hi`. Defaults to the grid
    /// spec's box, else 1 on every external channel.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    disturbance: Vec<String>,
    /// Shrink the spec by this margin.
    #[arg(long, conflicts_with = "cert")]
    epsilon: Option<f64>,
    /// Compute the margin from this certificate (needs --m1).
    #[arg(long, requires = "m1")]
    cert: Option<String>,
    #[arg(long)]
    m1: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    dmax: f64,
}

#[derive(Args)]
struct ClosedLoopArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, required_unless_present = "zero")]
    controller: Option<PathBuf>,
    /// Hold u2 at zero instead of using a controller.
    #[arg(long)]
    zero: bool,
    #[arg(long)]
    spec: Option<String>,
    /// Constant external disturbance.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    disturbance: f64,
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.005)]
    dt: f64,
    /// Sampling period for --zero.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run {
        /// Scenario JSON, or `isolated` / `compositional` for the bundled ones.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        controllers: Option<Switch>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn bundled_name(arg: &str) -> String {
    if arg.ends_with(".json") {
        arg.to_string()
    } else {
        format!("{arg}.json")
    }
}

fn read_model(arg: &str) -> Res<SystemModel> {
    let path = Path::new(arg);
    if path.exists() {
        return match load_model(path)? {
            LoadedModel::Model(m) => Ok(m),
            LoadedModel::Network(net) => Ok(net.interconnect()?),
        };
    }
    nets_data::model(&bundled_name(arg)).map_err(|_| CliError::Usage(format!("{arg}: no such file or bundled model")))
}

fn read_cert(arg: &str) -> Res<RsfCertificate> {
    let path = Path::new(arg);
    let mut cert = if path.exists() {
        RsfCertificate::load(path)?
    } else {
        nets_data::certificate(&bundled_name(arg))
            .map_err(|_| CliError::Usage(format!("{arg}: no such file or bundled certificate")))?
    };
    let asym = (&cert.m - cert.m.transpose()).amax();
    if asym > 0.0 {
        if asym > 1e-9 {
            eprintln!("warning: M is not symmetric (max asymmetry {asym:.3e}); using its symmetric part");
        }
        cert.m = numerics::symmetrize(&cert.m);
    }
    Ok(cert)
}

fn read_spec(arg: &str) -> Res<FreqSpec> {
    let path = Path::new(arg);
    let spec: FreqSpec = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(path).map_err(rsfkit::Error::from)?)
            .map_err(|e| rsfkit::Error::parse(arg, e))?
    } else {
        nets_data::spec(arg).map_err(|_| CliError::Usage(format!("{arg}: no such file or bundled spec")))?
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_complex(s: &str) -> Option<Complex64> {
    let s = s.trim();
    let Some(body) = s.strip_suffix('i').or_else(|| s.strip_suffix('j')) else {
        return s.parse().ok().map(|re| Complex64::new(re, 0.0));
    };
    let cut = body.char_indices().skip(1).filter(|(_, c)| *c == '+' || *c == '-').last()?.0;
    if body[..cut].ends_with(['e', 'E']) {
        return None;
    }
    let re: f64 = body[..cut].parse().ok()?;
    let im: f64 = match &body[cut..] {
        "+" => 1.0,
        "-" => -1.0,
        t => t.parse().ok()?,
    };
    Some(Complex64::new(re, im))
}

fn parse_poles(s: &str) -> Res<Vec<Complex64>> {
    s.split(',')
        .map(|t| parse_complex(t).ok_or_else(|| CliError::Usage(format!("bad pole {t:?}"))))
        .collect()
}

fn parse_box(s: &str) -> Res<Interval> {
    let bad = || CliError::Usage(format!("bad disturbance box {s:?}, use x or lo:hi"));
    match s.split_once(':') {
        Some((a, b)) => Ok(Interval::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => Ok(Interval::point(s.trim().parse().map_err(|_| bad())?)),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Res<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable")).map_err(rsfkit::Error::from)?;
    Ok(())
}

fn reduce(model: &str, order: usize, out: &Path, proj: Option<&Path>) -> Res<()> {
    let m = read_model(model)?;
    let red = rsfkit::reduction::balanced_truncate(&m, order)?;
    std::fs::write(out, red.reduced.to_json()).map_err(rsfkit::Error::from)?;
    if let Some(p) = proj {
        numerics::write_matrix_csv(p, &red.p)?;
    }
    for w in &red.warnings {
        eprintln!("warning: {w}");
    }
    let hsv: Vec<String> = red.hankel.iter().map(|h| format!("{h:.6e}")).collect();
    println!("hankel singular values: {}", hsv.join(" "));
    println!("wrote {} (order {order})", out.display());
    Ok(())
}

fn verify(pair: &PairArgs, tol: f64, as_json: bool) -> Res<()> {
    let (m1, m2, cert) = (read_model(&pair.m1)?, read_model(&pair.m2)?, read_cert(&pair.cert)?);
    let lmis = rsf::verify_lmis(&cert, &m1, &m2)?;
    let eq = rsf::verify_equalities(&cert, &m1, &m2, tol)?;
    let ok = lmis.pass() && eq.pass();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&json!({ "lmis": lmis, "equalities": eq, "pass": ok })).unwrap());
    } else {
        println!("lmi margins: decay {:.4e}, sector upper {:.4e}, sector lower {:.4e}", lmis.lmi_a_margin, lmis.lmi_b_margin, lmis.lmi_b_margin_lower);
        println!("closed-loop abscissa {:.4} (hurwitz: {})", lmis.abscissa, lmis.hurwitz);
        println!("equality residuals {:?} (tol {tol:e})", eq.residuals);
    }
    if !ok {
        return Err(CliError::Failed("certificate does not verify".into()));
    }
    println!("certificate verifies");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn construct(
    m1: &str,
    m2: Option<&str>,
    proj: Option<&Path>,
    lambda: f64,
    poles: Option<&str>,
    order: usize,
    out: &Path,
    reduced_out: Option<&Path>,
) -> Res<()> {
    let m1 = read_model(m1)?;
    let poles = poles.map(parse_poles).transpose()?;
    let (cert, lmis, residuals, m2) = match (m2, proj) {
        (Some(m2), Some(p)) => {
            let m2 = read_model(m2)?;
            let p = numerics::read_matrix_csv(p)?;
            let fixed = FixedGains::standard(&m1, &m2)?;
            let con = rsf::construct_certificate(&m1, &m2, &p, lambda, &fixed, poles.as_deref(), f64::INFINITY)?;
            (con.cert, con.lmis, con.equalities.residuals, m2)
        }
        _ => {
            let opts = PipelineOptions { order, lambda, pole_targets: poles, ..PipelineOptions::default() };
            let ab = rsf::construct_abstraction(&m1, &opts)?;
            (ab.cert, ab.lmis, ab.equalities.residuals, ab.m2)
        }
    };
    std::fs::write(out, cert.to_json()).map_err(rsfkit::Error::from)?;
    if let Some(r) = reduced_out {
        std::fs::write(r, m2.to_json()).map_err(rsfkit::Error::from)?;
    }
    println!("lmi margins: decay {:.4e}, sector {:.4e} / {:.4e}", lmis.lmi_a_margin, lmis.lmi_b_margin, lmis.lmi_b_margin_lower);
    println!("equality residuals {residuals:?}");
    println!("wrote {}", out.display());
    Ok(())
}

fn epsilon(pair: &PairArgs, dmax: f64, u2max: f64, as_json: bool) -> Res<()> {
    let (m1, m2, cert) = (read_model(&pair.m1)?, read_model(&pair.m2)?, read_cert(&pair.cert)?);
    let (c1, c2) = rsf::gamma_coefficients(&cert, &m1, &m2)?;
    let eps = rsf::epsilon_bound(&cert, &m1, &m2, &EpsilonQuery { d_max: dmax, u2_max: u2max, ..Default::default() })?;
    if as_json {
        println!("{}", json!({ "epsilon": eps, "c1": c1, "c2": c2, "d_max": dmax, "u2_max": u2max }));
    } else {
        println!("c1 = {c1:.6}, c2 = {c2:.6}");
        println!("epsilon = {eps:.6}");
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Res<()> {
    let m2 = read_model(&a.model)?;
    let grid_spec = match &a.grid {
        Some(p) => GridSpec::load(p)?,
        None => nets_data::grid()?,
    };
    let spec = read_spec(&a.spec)?;
    let eps = match (a.epsilon, &a.cert, &a.m1) {
        (Some(e), _, _) => e,
        (None, Some(c), Some(m1)) => {
            let q = EpsilonQuery { d_max: a.dmax, u2_max: a.u2max, ..Default::default() };
            rsf::epsilon_bound(&read_cert(c)?, &read_model(m1)?, &m2, &q)?
        }
        _ => {
            eprintln!("warning: no margin given, synthesizing for the unshrunk spec");
            0.0
        }
    };
    let hat = match shrink_spec(&spec, eps)? {
        Shrunk::Feasible(s) => s,
        Shrunk::Infeasible { reason, .. } => {
            return Err(CliError::Failed(format!("spec shrunk by epsilon = {eps:.4} is empty: {reason}")))
        }
    };
    let boxes = if a.disturbance.is_empty() {
        if grid_spec.disturbance.is_none() && m2.r() > 0 {
            return Err(CliError::Usage("model has internal channels: give --disturbance for every channel".into()));
        }
        vec![Interval::point(1.0); m2.q() + m2.r()]
    } else {
        a.disturbance.iter().map(|s| parse_box(s)).collect::<Res<Vec<_>>>()?
    };
    let mut grid = GridAbstraction::from_spec(&grid_spec, a.u2max, boxes)?;
    if let FreqSpec::ReachAvoid { safe, .. } = &hat {
        grid.output_band = Some(*safe);
    }
    let rel = symbolic::build_abstraction(&m2, &grid)?;
    let c_row: Vec<f64> = m2.c.row(0).iter().copied().collect();
    let (target, avoid) = symbolic::cells_for_spec(&grid, &c_row, &hat)?;
    let syn = symbolic::synthesize_recurrence(&rel, &target, &avoid)?;
    println!("epsilon = {eps:.6}");
    println!("cells {}, winning {}, iterations {}", grid.cell_count(), syn.winning_count(), syn.iterations.len());
    if syn.is_empty() {
        return Err(CliError::Failed("winning set is empty".into()));
    }
    let origin = vec![0.0; m2.n()];
    match symbolic::control_lookup(&syn.controller, &origin) {
        Ok(u) => println!("origin is winning, u2 = {u:?}"),
        Err(_) => println!("origin is not winning"),
    }
    syn.controller.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn closedloop(a: &ClosedLoopArgs) -> Res<()> {
    let (m1, m2, cert) = (read_model(&a.pair.m1)?, read_model(&a.pair.m2)?, read_cert(&a.pair.cert)?);
    let ctrl = a.controller.as_deref().map(SymbolicController::load).transpose()?;
    let policy = match (&ctrl, a.zero) {
        (Some(c), false) => Policy::Controller(c),
        _ => Policy::Zero,
    };
    let spec = a.spec.as_deref().map(read_spec).transpose()?;
    let mut d = vec![0.0; m1.q() + m1.r()];
    if let Some(first) = d.first_mut() {
        *first = a.disturbance;
    }
    let (x1, x2) = (Vector::zeros(m1.n()), Vector::zeros(m2.n()));
    let cl = symbolic::closed_loop(&m1, &m2, &cert, policy, &Signal::constant(&d), &x1, &x2, a.horizon, a.dt, a.tau, spec.as_ref())?;
    let check = rsf::check_rsf_conditions_along_trace(&cert, &m1, &m2, &cl.trace1, &cl.trace2)?;
    std::fs::create_dir_all(&a.out).map_err(rsfkit::Error::from)?;
    cl.trace1.save_csv(&a.out.join("concrete.csv"))?;
    cl.trace2.save_csv(&a.out.join("abstract.csv"))?;
    write_json(&a.out.join("report.json"), &json!({ "closed_loop": cl.report, "rsf": check }))?;
    let ex = export_plotdata(&[Series::new("closedloop", &cl.trace1, spec.as_ref())], &a.out)?;
    for w in ex.warnings {
        eprintln!("warning: {w}");
    }
    println!("max |y1 - y2| = {:.6}, max V = {:.6}", cl.report.max_mismatch, cl.report.max_v);
    if let Some(v) = &cl.report.concrete {
        println!("concrete verdict: {}", if v.satisfied { "satisfied" } else { "violated" });
    }
    let mut problems = Vec::new();
    if !cl.report.soundness_violations.is_empty() {
        problems.push(format!("controller lookups failed at {} samples", cl.report.soundness_violations.len()));
    }
    if !check.clean() {
        problems.push("simulation-function conditions violated along the run".to_string());
    }
    if let Some(v) = &cl.report.concrete {
        if !v.satisfied {
            problems.push(format!("spec violated at t = {:?}", v.first_violation));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Failed(problems.join("; ")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn monitor_cmd(
    trace: &Path,
    spec: &str,
    loss: Option<f64>,
    channel: usize,
    absolute: bool,
    power_channel: Option<usize>,
    power_scale: f64,
) -> Res<()> {
    let tr = Trace::load_csv(trace)?;
    let spec = read_spec(spec)?;
    let ys = tr.output_channel(channel)?;
    let absolute = absolute || (!ys.is_empty() && ys.iter().all(|y| *y > 30.0));
    let ctx = MonitorContext {
        loss_mw: loss,
        deviation: !absolute,
        channel,
        power_channel,
        power_scale,
        ..MonitorContext::default()
    };
    let v = monitor(&tr, &spec, &ctx)?;
    println!("{}", serde_json::to_string_pretty(&v).unwrap());
    if !v.satisfied {
        let at = v.first_violation.map(|t| format!(" at t = {t}")).unwrap_or_default();
        return Err(CliError::Failed(format!("violated{at}: {}", v.witness.clone().unwrap_or_default())));
    }
    if !v.pending.is_empty() {
        println!("satisfied so far, pending: {}", v.pending.join(", "));
    }
    Ok(())
}

fn scenario(config: &str, out: Option<&Path>, controllers: Option<Switch>, horizon: Option<f64>, dt: Option<f64>) -> Res<()> {
    let path = Path::new(config);
    let mut cfg = if path.exists() {
        ScenarioConfig::load(path)?
    } else {
        let name = config.trim_end_matches(".json").trim_start_matches("scenario_");
        nets_data::scenario(name).map_err(|_| CliError::Usage(format!("{config}: no such file or bundled scenario")))?
    };
    if let Some(s) = controllers {
        cfg.controllers = matches!(s, Switch::On);
    }
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    if let Some(d) = dt {
        cfg.dt = d;
    }
    let rep = run_scenario(&cfg)?;
    for a in &rep.areas {
        let eps = a.epsilon.map(|e| format!(", epsilon {e:.4}")).unwrap_or_default();
        println!(
            "area {}: {} (min {:.4}, max {:.4}{eps})",
            a.id,
            if a.verdict.satisfied { "satisfied" } else { "violated" },
            a.min_output,
            a.max_output
        );
    }
    match (&rep.composition_error, rep.refines_global) {
        (Some(e), _) => println!("composition failed: {e}"),
        (None, Some(r)) => println!("composed contract refines the global contract: {r}"),
        _ => {}
    }
    println!("global spec: {}", if rep.global_verdict.satisfied { "satisfied" } else { "violated" });
    if let Some(dir) = out {
        let files = rep.write_dir(dir)?;
        println!("wrote {} files to {}", files.len(), dir.display());
    }
    if !rep.global_verdict.satisfied || rep.refines_global != Some(true) {
        return Err(CliError::Failed("scenario does not meet the global contract".into()));
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ReportArea {
    id: usize,
    spec: FreqSpec,
}

#[derive(serde::Deserialize)]
struct ReportFile {
    areas: Vec<ReportArea>,
}

fn export(report: Option<&Path>, trace: Option<&Path>, spec: Option<&str>, name: &str, out: &Path) -> Res<()> {
    let mut owned: Vec<(String, Trace, Option<FreqSpec>)> = Vec::new();
    match (report, trace) {
        (Some(dir), _) => {
            let text = std::fs::read_to_string(dir.join("report.json")).map_err(rsfkit::Error::from)?;
            let rep: ReportFile = serde_json::from_str(&text).map_err(|e| rsfkit::Error::parse("report.json", e))?;
            for a in rep.areas {
                let tr = Trace::load_csv(&dir.join(format!("area{}.csv", a.id)))?;
                owned.push((format!("area{}", a.id), tr, Some(a.spec)));
            }
        }
        (None, Some(t)) => owned.push((name.to_string(), Trace::load_csv(t)?, spec.map(read_spec).transpose()?)),
        (None, None) => return Err(CliError::Usage("give --report or --trace".into())),
    }
    let series: Vec<Series> = owned.iter().map(|(n, t, s)| Series::new(n.clone(), t, s.as_ref())).collect();
    let ex = export_plotdata(&series, out)?;
    for w in &ex.warnings {
        eprintln!("warning: {w}");
    }
    for f in &ex.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::Reduce { model, order, out, proj } => reduce(&model, order, &out, proj.as_deref()),
        Cmd::Rsf { cmd } => match cmd {
            RsfCmd::Verify { pair, tol, json } => verify(&pair, tol, json),
            RsfCmd::Construct { m1, m2, proj, lambda, poles, order, out, reduced_out } => construct(
                &m1,
                m2.as_deref(),
                proj.as_deref(),
                lambda,
                poles.as_deref(),
                order,
                &out,
                reduced_out.as_deref(),
            ),
            RsfCmd::Epsilon { pair, dmax, u2max, json } => epsilon(&pair, dmax, u2max, json),
        },
        Cmd::Synth(a) => synth(&a),
        Cmd::Closedloop(a) => closedloop(&a),
        Cmd::Monitor { trace, spec, loss, channel, absolute, power_channel, power_scale } => {
            monitor_cmd(&trace, &spec, loss, channel, absolute, power_channel, power_scale)
        }
        Cmd::Scenario { cmd: ScenarioCmd::Run { config, out, controllers, horizon, dt } } => {
            scenario(&config, out.as_deref(), controllers, horizon, dt)
        }
        Cmd::Export { report, trace, spec, name, out } => {
            export(report.as_deref(), trace.as_deref(), spec.as_deref(), &name, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

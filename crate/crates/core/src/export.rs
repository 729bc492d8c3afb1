//! Plot-ready CSV panels: frequency against time with the target and safe
//! bands, and input against time.

use std::path::{Path, PathBuf};

use crate::contracts::ScenarioReport;
use crate::error::Result;
use crate::models::Trace;
use crate::specs::{FreqSpec, Interval};

pub const HEADER: [&str; 6] = ["t", "value", "band_T_lo", "band_T_hi", "band_A_lo", "band_A_hi"];

/// One trace to plot. `band_A_*` are the inner edges of the avoid region,
/// i.e. the safe band.
#[derive(Debug, Clone)]
pub struct Series<'a> {
    pub name: String,
    pub trace: &'a Trace,
    pub spec: Option<&'a FreqSpec>,
}

impl<'a> Series<'a> {
    pub fn new(name: impl Into<String>, trace: &'a Trace, spec: Option<&'a FreqSpec>) -> Self {
        Series { name: name.into(), trace, spec }
    }

    /// One series per area, named `area{id}`.
    pub fn from_scenario(report: &'a ScenarioReport) -> Vec<Series<'a>> {
        report.areas.iter().map(|a| Series::new(format!("area{}", a.id), &a.trace, Some(&a.spec))).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Export {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => v.to_string(),
        _ => String::new(),
    }
}

fn write_panel(path: &Path, t: &[f64], values: &[f64], bands: Option<(Interval, Interval)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    let (tb, ab) = match bands {
        Some((tb, ab)) => ([Some(tb.lo), Some(tb.hi)], [Some(ab.lo), Some(ab.hi)]),
        None => ([None; 2], [None; 2]),
    };
    for (t, v) in t.iter().zip(values) {
        w.write_record([t.to_string(), v.to_string(), cell(tb[0]), cell(tb[1]), cell(ab[0]), cell(ab[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `{name}_frequency.csv` and `{name}_input.csv` for every series.
/// Series without samples are skipped with a warning.
pub fn export_plotdata(series: &[Series], dir: &Path) -> Result<Export> {
    let mut out = Export::default();
    if series.iter().all(|s| s.trace.is_empty()) {
        out.warnings.push("nothing to export: the report holds no samples".into());
        return Ok(out);
    }
    std::fs::create_dir_all(dir)?;
    for s in series {
        if s.trace.is_empty() {
            out.warnings.push(format!("{}: empty trace skipped", s.name));
            continue;
        }
        let bands = match s.spec {
            Some(FreqSpec::ReachAvoid { target, safe }) => Some((*target, *safe)),
            Some(_) => {
                out.warnings.push(format!("{}: spec has no reach-avoid bands, band columns left empty", s.name));
                None
            }
            None => None,
        };
        let freq = dir.join(format!("{}_frequency.csv", s.name));
        write_panel(&freq, &s.trace.t, &s.trace.output_channel(0)?, bands)?;
        out.files.push(freq);
        let input = dir.join(format!("{}_input.csv", s.name));
        let u: Vec<f64> = s.trace.u.iter().map(|u| u.get(0).copied().unwrap_or(0.0)).collect();
        write_panel(&input, &s.trace.t, &u, None)?;
        out.files.push(input);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;

    fn trace(n: usize) -> Trace {
        Trace {
            dt: 0.1,
            t: (0..n).map(|k| k as f64 * 0.1).collect(),
            x: vec![Vector::zeros(1); n],
            y: (0..n).map(|k| Vector::from_element(1, -(k as f64) * 0.01)).collect(),
            u: vec![Vector::from_element(1, 0.2); n],
            v: vec![Vector::zeros(1); n],
            w: vec![Vector::zeros(0); n],
        }
    }

    #[test]
    fn two_panels_with_bands() {
        let dir = tempfile::tempdir().unwrap();
        let tr = trace(5);
        let spec = FreqSpec::ReachAvoid { target: Interval::new(-0.3, 0.5), safe: Interval::new(-0.35, 0.5) };
        let ex = export_plotdata(&[Series::new("area1", &tr, Some(&spec))], dir.path()).unwrap();
        assert_eq!(ex.files.len(), 2);
        assert!(ex.warnings.is_empty());
        let text = std::fs::read_to_string(dir.path().join("area1_frequency.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,value,band_T_lo,band_T_hi,band_A_lo,band_A_hi");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[2], "0.1,-0.01,-0.3,0.5,-0.35,0.5");
        let input = std::fs::read_to_string(dir.path().join("area1_input.csv")).unwrap();
        assert!(input.lines().nth(1).unwrap().starts_with("0,0.2,,"));
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plots");
        let ex = export_plotdata(&[], &out).unwrap();
        assert!(ex.files.is_empty());
        assert_eq!(ex.warnings.len(), 1);
        assert!(!out.exists());
    }

    #[test]
    fn three_areas_six_files() {
        let dir = tempfile::tempdir().unwrap();
        let tr = trace(3);
        let series: Vec<Series> = (1..=3).map(|i| Series::new(format!("area{i}"), &tr, None)).collect();
        assert_eq!(export_plotdata(&series, dir.path()).unwrap().files.len(), 6);
    }
}

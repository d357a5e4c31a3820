//! Run configuration, the machine-readable report, and derived tables.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::formulation::Norm;
use crate::sbnb::SourceMagnitude;

/// Magnitude above which a source counts as nonzero.
pub const NONZERO_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Local solve only.
    #[serde(rename = "nlp")]
    Nlp,
    /// Branch-and-bound from the initial box, no warm start.
    #[serde(rename = "blp")]
    Blp,
    /// Local solve, bound tightening, then warm-started branch-and-bound.
    #[serde(rename = "s-blp")]
    SBlp,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nlp" => Ok(Mode::Nlp),
            "blp" => Ok(Mode::Blp),
            "s-blp" | "sblp" => Ok(Mode::SBlp),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nlp => "nlp",
            Mode::Blp => "blp",
            Mode::SBlp => "s-blp",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub feeder: PathBuf,
    pub norm: Norm,
    pub mode: Mode,
    pub dv_box: f64,
    pub sbt_eps: f64,
    pub gap_tol: f64,
    /// Wall-clock limit for the whole run, seconds.
    pub time_limit_s: Option<f64>,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub export_mps: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(feeder: impl Into<PathBuf>, norm: Norm, mode: Mode) -> Self {
        RunConfig {
            feeder: feeder.into(),
            norm,
            mode,
            dv_box: 0.25,
            sbt_eps: 1e-4,
            gap_tol: 1e-4,
            time_limit_s: None,
            workers: 1,
            out: None,
            export_mps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("dv_box", self.dv_box)?;
        positive("sbt_eps", self.sbt_eps)?;
        positive("gap_tol", self.gap_tol)?;
        if let Some(t) = self.time_limit_s {
            positive("time_limit", t)?;
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BusMagnitude {
    pub bus: String,
    /// `√(Σ_phases |I|²)`.
    pub magnitude: f64,
}

/// Aggregates per-phase sources into per-bus magnitudes, largest first
/// (ties in first-seen order).
pub fn bus_magnitudes(sources: &[SourceMagnitude]) -> Vec<BusMagnitude> {
    let mut out: Vec<BusMagnitude> = Vec::new();
    for s in sources {
        match out.iter_mut().find(|b| b.bus == s.node) {
            Some(b) => b.magnitude = b.magnitude.hypot(s.magnitude),
            None => out.push(BusMagnitude {
                bus: s.node.clone(),
                magnitude: s.magnitude,
            }),
        }
    }
    out.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalSummary {
    pub status: String,
    pub objective: f64,
    pub iterations: usize,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SbtSummary {
    pub iterations: usize,
    pub cutoff: f64,
    pub reduction_dv_re: f64,
    pub reduction_dv_im: f64,
    pub subproblems: usize,
    pub numerical_failures: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub parse: f64,
    pub build: f64,
    pub local: f64,
    pub sbt: f64,
    pub bnb: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub feeder: String,
    pub mode: Mode,
    pub norm: Norm,
    /// Global statements hold relative to `ΔV ∈ [−dv_box, dv_box]`.
    pub dv_box: f64,
    pub status: String,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local: Option<LocalSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbt: Option<SbtSummary>,
    pub sources: Vec<SourceMagnitude>,
    pub buses: Vec<BusMagnitude>,
    pub timings: Timings,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn nonzero_sources(&self, threshold: f64) -> usize {
        self.sources
            .iter()
            .filter(|s| s.magnitude > threshold)
            .count()
    }

    /// `bus,magnitude` rows for bar charts of weak locations.
    pub fn plot_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bus", "magnitude"]).map_err(csv_err)?;
        for b in &self.buses {
            w.write_record([b.bus.as_str(), &format!("{:e}", b.magnitude)])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "feeder {}\nmode {} norm {} status {}\nobjective {:.9e}\n",
            self.feeder, self.mode, self.norm, self.status, self.objective
        );
        if let (Some(b), Some(g), Some(n)) = (self.best_bound, self.gap, self.nodes) {
            s += &format!("best bound {b:.9e}\ngap {g:.3e}\nnodes {n}\n");
            s += &format!("(certificate relative to dv_box = {} pu)\n", self.dv_box);
        }
        if let Some(t) = &self.sbt {
            s += &format!(
                "sbt {} iterations, width reduction re {:.2}% im {:.2}%\n",
                t.iterations, t.reduction_dv_re, t.reduction_dv_im
            );
        }
        let nonzero: Vec<_> = self
            .sources
            .iter()
            .filter(|x| x.magnitude > NONZERO_THRESHOLD)
            .collect();
        if nonzero.is_empty() {
            s += "no nonzero infeasibility sources\n";
        } else {
            s += "sources (node phase |I| pu):\n";
            for x in nonzero {
                s += &format!("  {} {} {:.6e}\n", x.node, x.phase, x.magnitude);
            }
        }
        s += &format!("time {:.3} s\n", self.timings.total);
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityTable {
    pub feeder: String,
    pub threshold: f64,
    pub l1_nonzero: usize,
    pub l2_nonzero: usize,
}

impl fmt::Display for SparsityTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "feeder\tthreshold\tl1_nonzero\tl2_nonzero")?;
        writeln!(
            f,
            "{}\t{:e}\t{}\t{}",
            self.feeder, self.threshold, self.l1_nonzero, self.l2_nonzero
        )
    }
}

/// Nonzero-source counts of an L1 and an L2 report on the same feeder.
pub fn emit_sparsity_comparison(l1: &Report, l2: &Report) -> Result<SparsityTable> {
    if l1.feeder != l2.feeder {
        return Err(Error::Config(format!(
            "reports are for different feeders: {} vs {}",
            l1.feeder, l2.feeder
        )));
    }
    Ok(SparsityTable {
        feeder: l1.feeder.clone(),
        threshold: NONZERO_THRESHOLD,
        l1_nonzero: l1.nonzero_sources(NONZERO_THRESHOLD),
        l2_nonzero: l2.nonzero_sources(NONZERO_THRESHOLD),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(node: &str, phase: &str, m: f64) -> SourceMagnitude {
        SourceMagnitude {
            node: node.into(),
            phase: phase.into(),
            re: m,
            im: 0.0,
            magnitude: m,
        }
    }

    fn report(feeder: &str, norm: Norm, sources: Vec<SourceMagnitude>) -> Report {
        Report {
            feeder: feeder.into(),
            mode: Mode::SBlp,
            norm,
            dv_box: 0.25,
            status: "optimal-within-gap".into(),
            objective: 0.0,
            best_bound: Some(0.0),
            gap: Some(0.0),
            nodes: Some(1),
            local: None,
            sbt: None,
            buses: bus_magnitudes(&sources),
            sources,
            timings: Timings::default(),
        }
    }

    #[test]
    fn modes_round_trip() {
        for m in [Mode::Nlp, Mode::Blp, Mode::SBlp] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new("x.json", Norm::L1, Mode::SBlp);
        assert!(c.validate().is_ok());
        c.gap_tol = 0.0;
        assert!(c.validate().is_err());
        c.gap_tol = 1e-4;
        c.workers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bus_aggregation_is_phase_norm() {
        let buses = bus_magnitudes(&[src("a", "a", 3.0), src("b", "a", 1.0), src("a", "b", 4.0)]);
        assert_eq!(buses.len(), 2);
        assert_eq!(buses[0].bus, "a");
        assert!((buses[0].magnitude - 5.0).abs() < 1e-15);
        assert_eq!(buses[1].magnitude, 1.0);
    }

    #[test]
    fn sparsity_counts() {
        let l1 = report("f", Norm::L1, vec![src("a", "a", 0.5), src("b", "a", 1e-9)]);
        let l2 = report("f", Norm::L2, vec![src("a", "a", 0.4), src("b", "a", 0.1)]);
        let t = emit_sparsity_comparison(&l1, &l2).unwrap();
        assert_eq!((t.l1_nonzero, t.l2_nonzero), (1, 2));
        let same = emit_sparsity_comparison(&l1, &l1).unwrap();
        assert_eq!(same.l1_nonzero, same.l2_nonzero);
        let other = report("g", Norm::L2, Vec::new());
        assert!(emit_sparsity_comparison(&l1, &other).is_err());
        let empty = report("f", Norm::L1, Vec::new());
        let t = emit_sparsity_comparison(&empty, &empty).unwrap();
        assert_eq!((t.l1_nonzero, t.l2_nonzero), (0, 0));
    }

    #[test]
    fn csv_and_json_shapes() {
        let r = report("f", Norm::L1, vec![src("n7", "c", 0.25)]);
        assert_eq!(r.plot_csv().unwrap(), "bus,magnitude\nn7,2.5e-1\n");
        let mut nlp = r.clone();
        nlp.mode = Mode::Nlp;
        nlp.best_bound = None;
        nlp.gap = None;
        nlp.nodes = None;
        let json = nlp.to_json().unwrap();
        assert!(!json.contains("\"gap\""));
        assert!(json.contains("\"mode\": \"nlp\""));
        assert!(r.summary_text().contains("n7 c"));
    }
}

//! End-to-end run: parse, build, local solve, tightening, branch-and-bound.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::convex::write_mps;
use crate::error::Error;
use crate::feeder::{parse_feeder, Network};
use crate::formulation::{build, initial_bounds, Bounds, ConstraintSystem, VariableSpace};
use crate::nlp::{flat_start, solve_local, LocalOptions, LocalSolution, LocalStatus};
use crate::relaxation::build_relaxation;
use crate::report::{bus_magnitudes, LocalSummary, Mode, Report, RunConfig, SbtSummary, Timings};
use crate::sbnb::{
    solve_global, source_indices, source_magnitudes, BnbOptions, GlobalResult, GlobalStatus,
};
use crate::sbt::{relaxed_cutoff, tighten, SbtOptions, TighteningTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Parse,
    Build,
    Local,
    Tightening,
    BranchAndBound,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Parse => "parse",
            Stage::Build => "build",
            Stage::Local => "local-nlp",
            Stage::Tightening => "sbt",
            Stage::BranchAndBound => "sbnb",
            Stage::Output => "output",
        })
    }
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const NLP_FAILURE: i32 = 4;
    pub const LIMIT: i32 = 5;
    pub const SOLVER: i32 = 6;
    pub const INFEASIBLE_BOX: i32 = 7;
    pub const IO: i32 = 8;
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match (&self.error, self.stage) {
            (Error::Io(_), Stage::Output) => exit::IO,
            (Error::Config(_), _) | (_, Stage::Config) => exit::CONFIG,
            (_, Stage::Parse) => exit::PARSE,
            (_, Stage::Local) => exit::NLP_FAILURE,
            (Error::Io(_), _) => exit::IO,
            _ => exit::SOLVER,
        }
    }
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |error| StageError { stage, error }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub local: Option<LocalSolution>,
    pub trace: Option<TighteningTrace>,
    pub global: Option<GlobalResult>,
    /// Box handed to branch-and-bound (after tightening, if any).
    pub final_bounds: Bounds,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        match self.global.as_ref().map(|g| g.status) {
            Some(GlobalStatus::TimeLimit | GlobalStatus::NodeLimit) => exit::LIMIT,
            Some(GlobalStatus::Infeasible) => exit::INFEASIBLE_BOX,
            _ => exit::SUCCESS,
        }
    }
}

fn local_solve(
    space: &VariableSpace,
    system: &ConstraintSystem,
    net: &Network,
    bounds: &Bounds,
) -> Result<LocalSolution, StageError> {
    let x0 = flat_start(space, system, net).map_err(at(Stage::Local))?;
    let sol = solve_local(
        system,
        bounds,
        &source_indices(space),
        &x0,
        &LocalOptions::default(),
    )
    .map_err(at(Stage::Local))?;
    if sol.status != LocalStatus::Converged {
        return Err(StageError {
            stage: Stage::Local,
            error: Error::Solver(format!(
                "local solver ended {:?} after {} iterations (violation {:.3e})",
                sol.status, sol.iterations, sol.max_violation
            )),
        });
    }
    Ok(sol)
}

/// Reads the feeder named in `config` and runs it.
pub fn run(config: &RunConfig) -> Result<RunOutput, StageError> {
    config.validate().map_err(at(Stage::Config))?;
    let t = Instant::now();
    let text = fs::read_to_string(&config.feeder)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", config.feeder.display()),
            ))
        })
        .map_err(at(Stage::Parse))?;
    let net = parse_feeder(&text).map_err(at(Stage::Parse))?;
    let parse_s = t.elapsed().as_secs_f64();
    let mut out = run_network(&net, config)?;
    out.report.timings.parse = parse_s;
    out.report.timings.total += parse_s;
    Ok(out)
}

/// Runs an already parsed network.
pub fn run_network(net: &Network, config: &RunConfig) -> Result<RunOutput, StageError> {
    config.validate().map_err(at(Stage::Config))?;
    let start = Instant::now();
    let mut timings = Timings::default();
    let t = Instant::now();
    let (space, system) = build(net, config.norm).map_err(at(Stage::Build))?;
    let root = initial_bounds(&space, net, config.dv_box).map_err(at(Stage::Build))?;
    timings.build = t.elapsed().as_secs_f64();

    let mut local = None;
    let mut trace = None;
    let mut bounds = root.clone();
    if matches!(config.mode, Mode::Nlp | Mode::SBlp) {
        let t = Instant::now();
        local = Some(local_solve(&space, &system, net, &root)?);
        timings.local = t.elapsed().as_secs_f64();
    }
    if config.mode == Mode::SBlp {
        let t = Instant::now();
        let cutoff = relaxed_cutoff(local.as_ref().expect("local solved").objective);
        let opts = SbtOptions {
            eps: config.sbt_eps,
            workers: config.workers,
            ..Default::default()
        };
        let (tightened, tr) =
            tighten(&space, net, &system, &root, cutoff, &opts).map_err(at(Stage::Tightening))?;
        bounds = tightened;
        trace = Some(tr);
        timings.sbt = t.elapsed().as_secs_f64();
    }
    if let Some(path) = &config.export_mps {
        let model = build_relaxation(&system, &bounds, None).map_err(at(Stage::Output))?;
        let file = fs::File::create(path).map_err(|e| at(Stage::Output)(e.into()))?;
        write_mps(&model, std::io::BufWriter::new(file)).map_err(at(Stage::Output))?;
    }

    let mut global = None;
    if config.mode != Mode::Nlp {
        let t = Instant::now();
        let opts = BnbOptions {
            gap_tol: config.gap_tol,
            time_limit: config
                .time_limit_s
                .map(|l| (l - start.elapsed().as_secs_f64()).max(0.0)),
            ..Default::default()
        };
        let warm = if config.mode == Mode::SBlp {
            local.as_ref()
        } else {
            None
        };
        global = Some(
            solve_global(&space, net, &system, &bounds, warm, &opts)
                .map_err(at(Stage::BranchAndBound))?,
        );
        timings.bnb = t.elapsed().as_secs_f64();
    }
    timings.total = start.elapsed().as_secs_f64();

    let report = make_report(
        config,
        &space,
        net,
        local.as_ref(),
        trace.as_ref(),
        global.as_ref(),
        timings,
    );
    Ok(RunOutput {
        report,
        local,
        trace,
        global,
        final_bounds: bounds,
    })
}

fn make_report(
    config: &RunConfig,
    space: &VariableSpace,
    net: &Network,
    local: Option<&LocalSolution>,
    trace: Option<&TighteningTrace>,
    global: Option<&GlobalResult>,
    timings: Timings,
) -> Report {
    let (status, objective, sources) = match (global, local) {
        (Some(g), _) => (
            serde_json::to_value(g.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            g.objective,
            g.sources.clone(),
        ),
        (None, Some(l)) => (
            "local-optimum".to_string(),
            l.objective,
            source_magnitudes(space, net, &l.x),
        ),
        (None, None) => unreachable!("every mode solves something"),
    };
    Report {
        feeder: config.feeder.display().to_string(),
        mode: config.mode,
        norm: config.norm,
        dv_box: config.dv_box,
        status,
        objective,
        best_bound: global.map(|g| g.best_bound),
        gap: global.map(|g| g.gap),
        nodes: global.map(|g| g.nodes),
        local: local.map(|l| LocalSummary {
            status: format!("{:?}", l.status),
            objective: l.objective,
            iterations: l.iterations,
            max_violation: l.max_violation,
        }),
        sbt: trace.map(|t| {
            let (re, im) = t.final_reduction();
            SbtSummary {
                iterations: t.iterations.len(),
                cutoff: t.cutoff,
                reduction_dv_re: re,
                reduction_dv_im: im,
                subproblems: t.iterations.iter().map(|i| i.subproblems).sum(),
                numerical_failures: t
                    .iterations
                    .iter()
                    .map(|i| i.statuses.numerical_failure)
                    .sum(),
            }
        }),
        buses: bus_magnitudes(&sources),
        sources,
        timings,
    }
}

/// Sibling path `<out stem>.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes the report JSON to `out`, plus `<stem>.buses.csv`, and
/// `<stem>.sbt.json` when a tightening trace exists.
pub fn write_outputs(output: &RunOutput, out: &Path) -> Result<Vec<PathBuf>, StageError> {
    let io = |e: std::io::Error| at(Stage::Output)(e.into());
    let mut written = vec![out.to_path_buf()];
    fs::write(out, output.report.to_json().map_err(at(Stage::Output))?).map_err(io)?;
    let csv = sibling(out, "buses.csv");
    fs::write(&csv, output.report.plot_csv().map_err(at(Stage::Output))?).map_err(io)?;
    written.push(csv);
    if let Some(t) = &output.trace {
        let p = sibling(out, "sbt.json");
        fs::write(&p, t.to_json().map_err(at(Stage::Output))?).map_err(io)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::Norm;

    const TWO_NODE: &str = r#"{
        "base_power_va": 1e6, "base_voltage_v": 7200,
        "nodes": [
            {"id": "s", "phases": ["a"], "kind": "slack"},
            {"id": "n", "phases": ["a"], "kind": "load",
             "loads": {"a": {"p_kw": 500, "q_kvar": 100}}}
        ],
        "lines": [{"from": "s", "to": "n", "phases": ["a"],
                   "y_series_pu": {"re": [[2.0]], "im": [[-4.0]]}}]
    }"#;

    #[test]
    fn modes_on_feasible_case() {
        let net = parse_feeder(TWO_NODE).unwrap();
        for mode in [Mode::Nlp, Mode::Blp, Mode::SBlp] {
            let cfg = RunConfig::new("two.json", Norm::L1, mode);
            let out = run_network(&net, &cfg).unwrap();
            assert!(out.report.objective <= 1e-8, "{mode}");
            assert_eq!(out.report.gap.is_none(), mode == Mode::Nlp);
            assert_eq!(out.exit_code(), exit::SUCCESS);
        }
    }

    #[test]
    fn errors_carry_stage_and_code() {
        let mut cfg = RunConfig::new("/nonexistent/feeder.json", Norm::L2, Mode::Nlp);
        let e = run(&cfg).unwrap_err();
        assert_eq!((e.stage, e.exit_code()), (Stage::Parse, exit::PARSE));
        cfg.dv_box = -1.0;
        assert_eq!(run(&cfg).unwrap_err().exit_code(), exit::CONFIG);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let feeder = dir.path().join("two.json");
        fs::write(
            &feeder,
            TWO_NODE.replace("500", "3000").replace("100}", "1500}"),
        )
        .unwrap();
        let mut cfg = RunConfig::new(&feeder, Norm::L1, Mode::SBlp);
        cfg.export_mps = Some(dir.path().join("root.mps"));
        let out = run(&cfg).unwrap();
        assert!(out.report.gap.unwrap() <= 1e-4);
        let files = write_outputs(&out, &dir.path().join("report.json")).unwrap();
        assert_eq!(files.len(), 3);
        assert!(fs::read_to_string(&files[1])
            .unwrap()
            .starts_with("bus,magnitude\nn,"));
        assert!(fs::read_to_string(dir.path().join("root.mps"))
            .unwrap()
            .contains("ENDATA"));
    }
}

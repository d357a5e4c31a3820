//! Sequential bound tightening of the voltage-deviation box.
//!
//! Each iteration minimizes and maximizes every non-fixed filtered variable
//! over the convex relaxation plus the cutoff row `f ≤ cutoff`. All
//! subproblems in an iteration read the iteration-start box (Jacobi update),
//! so the result does not depend on how they are scheduled across workers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::convex::{solve_convex, ConvexModel, ConvexStatus};
use crate::error::{Error, Result};
use crate::feeder::Network;
use crate::formulation::{
    propagate_unfiltered_bounds, Bounds, ConstraintSystem, Role, VariableSpace,
};
use crate::relaxation::build_relaxation;

#[derive(Debug, Clone, Serialize)]
pub struct SbtOptions {
    /// Loop guard on the L2 norm of the per-iteration bound change, pu.
    pub eps: f64,
    pub max_iter: usize,
    pub workers: usize,
    /// Outward safety margin applied to each tightened bound.
    pub margin: f64,
}

impl Default for SbtOptions {
    fn default() -> Self {
        SbtOptions {
            eps: 1e-4,
            max_iter: 20,
            workers: 1,
            margin: 1e-7,
        }
    }
}

/// The cutoff used in the tightening row: the local objective plus a small
/// relative allowance for solver tolerances.
pub fn relaxed_cutoff(objective: f64) -> f64 {
    objective + (1e-6 * objective.abs()).max(1e-8)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StatusCounts {
    pub optimal: usize,
    pub numerical_failure: usize,
    pub unbounded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub reduction_dv_re: f64,
    pub reduction_dv_im: f64,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub subproblems: usize,
    pub statuses: StatusCounts,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TighteningTrace {
    /// Variable indices of the tightened coordinates, aligned with every bound vector below.
    pub variables: Vec<usize>,
    pub labels: Vec<String>,
    pub initial_lower: Vec<f64>,
    pub initial_upper: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub cutoff: f64,
    pub seconds: f64,
}

impl TighteningTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_reduction(&self) -> (f64, f64) {
        self.iterations
            .last()
            .map_or((0.0, 0.0), |r| (r.reduction_dv_re, r.reduction_dv_im))
    }
}

/// `100·(1 − mean(after)/mean(before))` over `indices`, skipping
/// variables whose initial width is zero.
pub fn width_reduction(before: &Bounds, after: &Bounds, indices: &[usize]) -> f64 {
    let kept: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&j| before.width(j) > 0.0)
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    let mb: f64 = kept.iter().map(|&j| before.width(j)).sum::<f64>() / kept.len() as f64;
    let ma: f64 = kept.iter().map(|&j| after.width(j)).sum::<f64>() / kept.len() as f64;
    100.0 * (1.0 - ma / mb)
}

pub fn role_indices(space: &VariableSpace, role: Role) -> Vec<usize> {
    space
        .vars
        .iter()
        .enumerate()
        .filter(|(_, v)| v.role == role)
        .map(|(j, _)| j)
        .collect()
}

struct Outcome {
    status: ConvexStatus,
    bound: f64,
}

fn solve_all(
    template: &ConvexModel,
    jobs: &[(usize, bool)],
    workers: usize,
) -> Result<Vec<Outcome>> {
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<Outcome>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let run = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        if k >= jobs.len() {
            break;
        }
        let (var, maximize) = jobs[k];
        let mut model = template.clone();
        model.objective = vec![(var, if maximize { -1.0 } else { 1.0 })];
        model.quad_objective.clear();
        let out = solve_convex(&model).map(|s| Outcome {
            status: s.status,
            bound: if maximize {
                -s.lower_bound()
            } else {
                s.lower_bound()
            },
        });
        *results[k].lock().expect("result slot") = Some(out);
    };
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        run();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(run);
            }
        });
    }
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

fn l2_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Tightens the filtered box under the cutoff row `f ≤ cutoff`.
///
/// `cutoff` should already include any allowance (see [`relaxed_cutoff`]).
/// Any NLP-feasible point with objective ≤ cutoff inside `bounds` stays
/// inside the returned box.
pub fn tighten(
    space: &VariableSpace,
    net: &Network,
    system: &ConstraintSystem,
    bounds: &Bounds,
    cutoff: f64,
    opts: &SbtOptions,
) -> Result<(Bounds, TighteningTrace)> {
    let start = Instant::now();
    let vars: Vec<usize> = space
        .filtered
        .iter()
        .copied()
        .filter(|&j| !bounds.is_fixed(j))
        .collect();
    let re = role_indices(space, Role::DvRe);
    let im = role_indices(space, Role::DvIm);
    let mut trace = TighteningTrace {
        labels: vars.iter().map(|&j| space.describe(net, j)).collect(),
        initial_lower: vars.iter().map(|&j| bounds.lower[j]).collect(),
        initial_upper: vars.iter().map(|&j| bounds.upper[j]).collect(),
        variables: vars.clone(),
        iterations: Vec::new(),
        cutoff,
        seconds: 0.0,
    };
    let mut current = bounds.clone();
    let jobs: Vec<(usize, bool)> = vars.iter().flat_map(|&j| [(j, false), (j, true)]).collect();

    loop {
        let it_start = Instant::now();
        let template = build_relaxation(system, &current, Some(cutoff))?;
        let outcomes = solve_all(&template, &jobs, opts.workers)?;
        let mut next = current.clone();
        let mut statuses = StatusCounts::default();
        for (&(j, maximize), out) in jobs.iter().zip(&outcomes) {
            match out.status {
                ConvexStatus::Optimal => {
                    statuses.optimal += 1;
                    if maximize {
                        let u = (out.bound + opts.margin).min(current.upper[j]);
                        next.upper[j] = u.max(current.lower[j]);
                    } else {
                        let l = (out.bound - opts.margin).max(current.lower[j]);
                        next.lower[j] = l.min(current.upper[j]);
                    }
                }
                ConvexStatus::PrimalInfeasible => {
                    return Err(Error::Tightening(format!(
                        "{} subproblem for {} is infeasible under cutoff {cutoff:.6e}",
                        if maximize { "max" } else { "min" },
                        space.describe(net, j)
                    )));
                }
                ConvexStatus::Unbounded => statuses.unbounded += 1,
                ConvexStatus::NumericalFailure => statuses.numerical_failure += 1,
            }
        }
        for &j in &vars {
            if next.lower[j] > next.upper[j] {
                let mid = 0.5 * (next.lower[j] + next.upper[j]);
                next.lower[j] = mid;
                next.upper[j] = mid;
            }
        }
        let next = propagate_unfiltered_bounds(space, net, &next)
            .map_err(|e| Error::Tightening(format!("propagation after tightening: {e}")))?;

        let lo_prev: Vec<f64> = vars.iter().map(|&j| current.lower[j]).collect();
        let up_prev: Vec<f64> = vars.iter().map(|&j| current.upper[j]).collect();
        let lo: Vec<f64> = vars.iter().map(|&j| next.lower[j]).collect();
        let up: Vec<f64> = vars.iter().map(|&j| next.upper[j]).collect();
        let record = IterationRecord {
            delta_lower: l2_delta(&lo, &lo_prev),
            delta_upper: l2_delta(&up, &up_prev),
            reduction_dv_re: width_reduction(bounds, &next, &re),
            reduction_dv_im: width_reduction(bounds, &next, &im),
            lower: lo,
            upper: up,
            subproblems: jobs.len(),
            statuses,
            seconds: it_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "sbt iter {}: dl={:.3e} du={:.3e} reduction re={:.2}% im={:.2}%",
            trace.iterations.len() + 1,
            record.delta_lower,
            record.delta_upper,
            record.reduction_dv_re,
            record.reduction_dv_im
        );
        let done = record.delta_lower <= opts.eps && record.delta_upper <= opts.eps;
        trace.iterations.push(record);
        current = next;
        if done || trace.iterations.len() >= opts.max_iter {
            break;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((current, trace))
}

//! Spatial branch-and-bound over the ΔV box.
//!
//! Nodes are explored best-bound-first. Each node bounds its box with the
//! McCormick relaxation; incumbents come from the warm start, from
//! relaxation points that already satisfy every bilinear identity, and from
//! periodic local solves started at relaxation points. The tree loop is
//! single-threaded, so runs are reproducible bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::Serialize;

use crate::convex::{solve_convex, ConvexStatus};
use crate::error::{Error, Result};
use crate::feeder::Network;
use crate::formulation::{
    assemble_point, evaluate_residual, propagate_unfiltered_bounds, voltages_from_point, Bounds,
    ConstraintSystem, VariableSpace,
};
use crate::nlp::{solve_local, LocalOptions, LocalSolution};
use crate::relaxation::build_relaxation;

/// A bilinear identity counts as satisfied at this absolute residual.
pub const BILINEAR_TOL: f64 = 1e-7;
/// Relative pruning margin against the incumbent.
pub const PRUNE_MARGIN: f64 = 1e-12;
/// Boxes narrower than this are not split further.
pub const MIN_BRANCH_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct BnbOptions {
    pub gap_tol: f64,
    pub time_limit: Option<f64>,
    pub node_limit: Option<usize>,
    /// Run a local solve from the relaxation point every this many nodes (the root always).
    pub polish_every: usize,
    pub local: LocalOptions,
}

impl Default for BnbOptions {
    fn default() -> Self {
        BnbOptions {
            gap_tol: 1e-4,
            time_limit: None,
            node_limit: None,
            polish_every: 10,
            local: LocalOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnBNode {
    /// Full box, with unfiltered bounds derived from the ΔV box.
    pub bounds: Bounds,
    /// Lower bound inherited from the parent relaxation.
    pub parent_bound: f64,
    pub depth: usize,
    pub id: usize,
}

struct Queued(BnBNode);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed so that `BinaryHeap` pops the lowest bound, then the lowest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .parent_bound
            .total_cmp(&self.0.parent_bound)
            .then(other.0.id.cmp(&self.0.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalStatus {
    OptimalWithinGap,
    TimeLimit,
    NodeLimit,
    /// Every node was infeasible and no incumbent exists.
    Infeasible,
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceMagnitude {
    pub node: String,
    pub phase: String,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProgressEntry {
    pub nodes: usize,
    pub f_inc: f64,
    pub f_bd: f64,
    pub gap: f64,
    pub seconds: f64,
}

impl ProgressEntry {
    pub fn log_line(&self) -> String {
        format!(
            "bnb nodes={} f_inc={:.12e} f_bd={:.12e} gap={:.6e} t={:.3}",
            self.nodes, self.f_inc, self.f_bd, self.gap, self.seconds
        )
    }

    /// Inverse of [`ProgressEntry::log_line`].
    pub fn parse_log_line(line: &str) -> Option<Self> {
        let mut rest = line.strip_prefix("bnb ")?.split(' ');
        let mut field = |key: &str| -> Option<f64> {
            rest.next()?
                .strip_prefix(key)?
                .strip_prefix('=')?
                .parse()
                .ok()
        };
        Some(ProgressEntry {
            nodes: field("nodes")? as usize,
            f_inc: field("f_inc")?,
            f_bd: field("f_bd")?,
            gap: field("gap")?,
            seconds: field("t")?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalResult {
    pub status: GlobalStatus,
    /// Incumbent point; empty when none was found.
    pub incumbent: Vec<f64>,
    pub objective: f64,
    pub best_bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub root_bound: f64,
    /// Objective recomputed from the incumbent voltages by direct KCL evaluation.
    pub verified_objective: f64,
    pub max_violation: f64,
    /// Candidate sources sorted by magnitude, largest first.
    pub sources: Vec<SourceMagnitude>,
    pub progress: Vec<ProgressEntry>,
    pub incumbent_updates: usize,
    pub numerical_failures: usize,
    pub seconds: f64,
}

impl GlobalResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `|f_inc − f_bd| / max(|f_inc|, 1e-12)`.
pub fn compute_gap(f_inc: f64, f_bd: f64) -> f64 {
    (f_inc - f_bd).abs() / f_inc.abs().max(1e-12)
}

/// Picks the filtered variable behind the worst bilinear violation, scored
/// by `|violation| · width`, lowest index on ties.
///
/// Returns `Ok(None)` when every candidate is narrower than
/// [`MIN_BRANCH_WIDTH`], and an error when no term is violated.
pub fn select_branch_variable(
    space: &VariableSpace,
    system: &ConstraintSystem,
    bounds: &Bounds,
    x: &[f64],
) -> Result<Option<usize>> {
    select_by(system, bounds, x, |j| space.filtered_parents(j))
}

fn select_by(
    system: &ConstraintSystem,
    bounds: &Bounds,
    x: &[f64],
    parents: impl Fn(usize) -> Vec<usize>,
) -> Result<Option<usize>> {
    let mut best: Option<(f64, usize)> = None;
    let mut violated = false;
    for t in &system.bilinear {
        let v = t.residual(x).abs();
        if v <= BILINEAR_TOL {
            continue;
        }
        violated = true;
        let mut cands = parents(t.left);
        cands.extend(parents(t.right));
        for j in cands {
            let w = bounds.width(j);
            if w <= MIN_BRANCH_WIDTH {
                continue;
            }
            let score = v * w;
            let better = match best {
                None => true,
                Some((s, k)) => score > s || (score == s && j < k),
            };
            if better {
                best = Some((score, j));
            }
        }
    }
    if !violated {
        return Err(Error::Solver(
            "branching requested with no violated bilinear term".into(),
        ));
    }
    Ok(best.map(|b| b.1))
}

/// The split value for `var` at `point`, kept within 10–90% of the interval.
pub fn split_point(lower: f64, upper: f64, point: f64) -> f64 {
    let w = upper - lower;
    point.clamp(lower + 0.1 * w, upper - 0.1 * w)
}

/// Splits `node` on `var`. A child whose derived boxes are empty is `None`.
pub fn branch(
    space: &VariableSpace,
    net: &Network,
    node: &BnBNode,
    var: usize,
    point: f64,
    bound: f64,
    next_id: &mut usize,
) -> Result<(Option<BnBNode>, Option<BnBNode>)> {
    let (l, u) = (node.bounds.lower[var], node.bounds.upper[var]);
    if !(u - l > MIN_BRANCH_WIDTH) {
        return Err(Error::Solver(format!(
            "variable {var} too narrow to branch: [{l}, {u}]"
        )));
    }
    let s = split_point(l, u, point);
    let mut child = |lo: f64, hi: f64| -> Option<BnBNode> {
        let mut b = node.bounds.clone();
        b.lower[var] = lo;
        b.upper[var] = hi;
        let bounds = propagate_unfiltered_bounds(space, net, &b).ok()?;
        *next_id += 1;
        Some(BnBNode {
            bounds,
            parent_bound: bound,
            depth: node.depth + 1,
            id: *next_id,
        })
    };
    let left = child(l, s);
    let right = child(s, u);
    Ok((left, right))
}

/// Magnitudes of every candidate source at `x`, largest first.
pub fn source_magnitudes(space: &VariableSpace, net: &Network, x: &[f64]) -> Vec<SourceMagnitude> {
    let mut out: Vec<SourceMagnitude> = space
        .node_phases
        .iter()
        .filter_map(|npv| {
            let i = npv.source?.current(x);
            Some(SourceMagnitude {
                node: net.nodes[npv.site.node].id.clone(),
                phase: npv.site.phase.as_str().to_string(),
                re: i.re,
                im: i.im,
                magnitude: i.norm(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    out
}

pub fn source_indices(space: &VariableSpace) -> Vec<usize> {
    space
        .node_phases
        .iter()
        .filter_map(|n| n.source)
        .flat_map(|s| s.indices())
        .collect()
}

struct Incumbent {
    x: Vec<f64>,
    f: f64,
    updates: usize,
}

struct Tree<'a> {
    space: &'a VariableSpace,
    net: &'a Network,
    system: &'a ConstraintSystem,
    root: &'a Bounds,
    sources: Vec<usize>,
    inc: Incumbent,
}

impl Tree<'_> {
    /// Accepts `x` if it is feasible for the bilinear program within the
    /// root box and strictly improves the incumbent.
    fn offer(&mut self, x: &[f64], origin: &str) -> bool {
        let f = self.system.objective.value(x);
        if !(f < self.inc.f) {
            return false;
        }
        let all: Vec<usize> = (0..x.len()).collect();
        if self.system.max_violation(x) > BILINEAR_TOL || !self.root.contains(x, &all, 1e-9) {
            return false;
        }
        log::debug!("incumbent {f:.12e} from {origin}");
        self.inc = Incumbent {
            x: x.to_vec(),
            f: f.max(0.0),
            updates: self.inc.updates + 1,
        };
        true
    }

    fn polish(&mut self, bounds: &Bounds, x: &[f64], opts: &LocalOptions) {
        let v = voltages_from_point(self.space, self.net, x);
        let start =
            assemble_point(self.space, self.system, self.net, &v).unwrap_or_else(|_| x.to_vec());
        match solve_local(self.system, bounds, &self.sources, &start, opts) {
            Ok(sol) if sol.is_converged() => {
                self.offer(&sol.x, "local solve");
            }
            Ok(sol) => log::debug!("node polish ended {:?}", sol.status),
            Err(e) => log::debug!("node polish failed: {e}"),
        }
    }
}

/// Solves the bilinear program globally over `bounds`.
///
/// `warm` becomes the first incumbent when it is feasible. All certificates
/// are relative to `bounds`.
pub fn solve_global(
    space: &VariableSpace,
    net: &Network,
    system: &ConstraintSystem,
    bounds: &Bounds,
    warm: Option<&LocalSolution>,
    opts: &BnbOptions,
) -> Result<GlobalResult> {
    let start = Instant::now();
    let mut tree = Tree {
        space,
        net,
        system,
        root: bounds,
        sources: source_indices(space),
        inc: Incumbent {
            x: Vec::new(),
            f: f64::INFINITY,
            updates: 0,
        },
    };
    if let Some(w) = warm {
        if w.is_converged() && !tree.offer(&w.x, "warm start") {
            log::warn!(
                "warm start rejected as incumbent (violation {:.3e})",
                w.max_violation
            );
        }
    }

    let mut heap = BinaryHeap::new();
    let mut next_id = 0;
    heap.push(Queued(BnBNode {
        bounds: bounds.clone(),
        parent_bound: f64::NEG_INFINITY,
        depth: 0,
        id: 0,
    }));
    let mut nodes = 0;
    let mut numerical_failures = 0;
    let mut root_bound = f64::NEG_INFINITY;
    // Lowest bound among nodes closed without a proof (too narrow to split).
    let mut unresolved = f64::INFINITY;
    let mut progress: Vec<ProgressEntry> = Vec::new();
    let mut f_bd_seen = f64::NEG_INFINITY;

    let best_bound = |heap: &BinaryHeap<Queued>, unresolved: f64, f_inc: f64| -> f64 {
        let open = heap.peek().map_or(f64::INFINITY, |q| q.0.parent_bound);
        open.min(unresolved).min(f_inc).max(0.0)
    };
    let record = |nodes: usize, f_inc: f64, f_bd: f64, progress: &mut Vec<ProgressEntry>| {
        let e = ProgressEntry {
            nodes,
            f_inc,
            f_bd,
            gap: compute_gap(f_inc, f_bd),
            seconds: start.elapsed().as_secs_f64(),
        };
        let changed = progress
            .last()
            .is_none_or(|p| p.f_inc != f_inc || p.f_bd != f_bd);
        if changed || nodes.is_multiple_of(100) {
            log::info!("{}", e.log_line());
            progress.push(e);
        }
    };

    let status = loop {
        let f_inc = tree.inc.f;
        if nodes > 0 {
            let f_bd = best_bound(&heap, unresolved, f_inc).max(f_bd_seen);
            f_bd_seen = f_bd;
            record(nodes, f_inc, f_bd, &mut progress);
            if heap.is_empty() {
                break if f_inc.is_finite() || unresolved.is_finite() {
                    GlobalStatus::OptimalWithinGap
                } else {
                    GlobalStatus::Infeasible
                };
            }
            if f_inc.is_finite() && compute_gap(f_inc, f_bd) <= opts.gap_tol {
                break GlobalStatus::OptimalWithinGap;
            }
        }
        if opts
            .time_limit
            .is_some_and(|t| start.elapsed().as_secs_f64() >= t)
        {
            break GlobalStatus::TimeLimit;
        }
        if opts.node_limit.is_some_and(|n| nodes >= n) {
            break GlobalStatus::NodeLimit;
        }
        let Some(Queued(node)) = heap.pop() else {
            unreachable!("empty heap handled above")
        };
        if node.parent_bound >= f_inc * (1.0 - PRUNE_MARGIN) {
            continue;
        }
        nodes += 1;
        let model = build_relaxation(system, &node.bounds, None)?;
        let sol = solve_convex(&model)?;
        let lb = match sol.status {
            ConvexStatus::PrimalInfeasible => continue,
            ConvexStatus::Optimal => node.parent_bound.max(sol.lower_bound()),
            ConvexStatus::Unbounded => {
                return Err(Error::Solver(
                    "relaxation unbounded; the box must be finite".into(),
                ))
            }
            ConvexStatus::NumericalFailure => {
                numerical_failures += 1;
                node.parent_bound
            }
        };
        if node.depth == 0 {
            root_bound = lb.max(0.0);
        }
        if sol.status == ConvexStatus::Optimal {
            if system.max_bilinear_residual(&sol.x) <= BILINEAR_TOL {
                // The relaxation optimum is feasible, so this box is solved.
                tree.offer(&sol.x, "relaxation");
                if sol.x.iter().all(|v| v.is_finite())
                    && system.max_violation(&sol.x) <= BILINEAR_TOL
                {
                    continue;
                }
            }
            if lb >= tree.inc.f * (1.0 - PRUNE_MARGIN) {
                continue;
            }
            if opts.polish_every > 0 && (node.depth == 0 || nodes % opts.polish_every == 0) {
                tree.polish(&node.bounds, &sol.x, &opts.local);
                if lb >= tree.inc.f * (1.0 - PRUNE_MARGIN) {
                    continue;
                }
            }
        }

        let choice = if sol.status == ConvexStatus::Optimal {
            select_branch_variable(space, system, &node.bounds, &sol.x)
                .ok()
                .flatten()
                .map(|j| (j, sol.x[j]))
        } else {
            widest(space, &node.bounds)
                .map(|j| (j, 0.5 * (node.bounds.lower[j] + node.bounds.upper[j])))
        };
        match choice {
            Some((var, point)) => {
                let (l, r) = branch(space, net, &node, var, point, lb, &mut next_id)?;
                for c in [l, r].into_iter().flatten() {
                    heap.push(Queued(c));
                }
            }
            None => unresolved = unresolved.min(lb),
        }
    };

    let f_inc = tree.inc.f;
    let best_bound = if heap.is_empty()
        && status != GlobalStatus::TimeLimit
        && status != GlobalStatus::NodeLimit
    {
        unresolved.min(f_inc).max(0.0)
    } else {
        best_bound(&heap, unresolved, f_inc)
    }
    .max(f_bd_seen.min(f_inc));
    let gap = if f_inc.is_finite() {
        compute_gap(f_inc, best_bound)
    } else {
        f64::INFINITY
    };
    let final_entry = ProgressEntry {
        nodes,
        f_inc,
        f_bd: best_bound,
        gap,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("{}", final_entry.log_line());
    progress.push(final_entry);

    let (verified_objective, max_violation, sources) = if tree.inc.x.is_empty() {
        (f64::NAN, f64::NAN, Vec::new())
    } else {
        let x = &tree.inc.x;
        let res = evaluate_residual(net, &voltages_from_point(space, net, x))?;
        (
            res.objective(space.norm),
            system.max_violation(x),
            source_magnitudes(space, net, x),
        )
    };
    Ok(GlobalResult {
        status,
        incumbent: tree.inc.x,
        objective: f_inc,
        best_bound,
        gap,
        nodes,
        root_bound,
        verified_objective,
        max_violation,
        sources,
        progress,
        incumbent_updates: tree.inc.updates,
        numerical_failures,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn widest(space: &VariableSpace, bounds: &Bounds) -> Option<usize> {
    space
        .filtered
        .iter()
        .copied()
        .filter(|&j| bounds.width(j) > MIN_BRANCH_WIDTH)
        .fold(None, |best: Option<usize>, j| match best {
            Some(k) if bounds.width(k) >= bounds.width(j) => Some(k),
            _ => Some(j),
        })
}

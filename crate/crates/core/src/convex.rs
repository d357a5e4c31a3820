//! Convex LP/QP/SOCP solves for the relaxations, backed by Clarabel.
//!
//! A [`ConvexModel`] is the generic form
//!
//! ```text
//! min  Σ c·x + ½ Σ q·x²
//! s.t. A_eq x = b_eq,  A_le x ≤ b_le,
//!      Σ q_r·x² + a_r·x ≤ b_r   (convex separable quadratic rows)
//!      l ≤ x ≤ u
//! ```
//!
//! Before handing the model to the interior-point solver, fixed variables are
//! substituted out, empty rows are checked and dropped, and inequality rows
//! implied by the variable bounds are dropped. Quadratic rows become rotated
//! second-order cones: `Σ q x² ≤ t` with `t = b − a·x` is
//! `‖(2√q x, t − 1)‖ ≤ t + 1`.

use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rows::{LinearRow, QuadRow};

pub const FEAS_TOL: f64 = 1e-8;
pub const GAP_TOL: f64 = 1e-8;
pub const MAX_ITER: u32 = 200;
/// Relative weak-duality tolerance checked on every optimal solve.
pub const DUALITY_CHECK: f64 = 1e-7;

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConvexModel {
    pub n: usize,
    pub objective: Vec<(usize, f64)>,
    /// Diagonal `q` of the objective term `½ Σ q·x²`; entries must be nonnegative.
    pub quad_objective: Vec<(usize, f64)>,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
    pub quadratic: Vec<QuadRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConvexModel {
    pub fn new(n: usize) -> Self {
        ConvexModel {
            n,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            ..Default::default()
        }
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.objective.iter().map(|&(j, c)| c * x[j]).sum();
        let quad: f64 = self
            .quad_objective
            .iter()
            .map(|&(j, q)| q * x[j] * x[j])
            .sum();
        lin + 0.5 * quad
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let eq = self.equalities.iter().map(|r| r.residual(x).abs());
        let le = self.inequalities.iter().map(|r| r.residual(x).max(0.0));
        let qd = self.quadratic.iter().map(|r| r.residual(x).max(0.0));
        let bd = (0..self.n).map(|j| (self.lower[j] - x[j]).max(x[j] - self.upper[j]).max(0.0));
        eq.chain(le).chain(qd).chain(bd).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Solver(format!("invalid convex model: {what}")));
        if self.lower.len() != self.n || self.upper.len() != self.n {
            return bad("bound vectors do not match variable count");
        }
        if self.quad_objective.iter().any(|&(_, q)| !(q >= 0.0)) {
            return bad("negative quadratic objective term");
        }
        if self
            .quadratic
            .iter()
            .any(|r| r.squares.iter().any(|&(_, q)| !(q >= 0.0)))
        {
            return bad("nonconvex quadratic row");
        }
        let idx_ok = |c: &[(usize, f64)]| c.iter().all(|&(j, v)| j < self.n && v.is_finite());
        let rows_ok = self
            .equalities
            .iter()
            .chain(&self.inequalities)
            .all(|r| idx_ok(&r.coeffs) && r.rhs.is_finite())
            && self
                .quadratic
                .iter()
                .all(|r| idx_ok(&r.squares) && idx_ok(&r.linear) && r.rhs.is_finite())
            && idx_ok(&self.objective)
            && idx_ok(&self.quad_objective);
        if !rows_ok {
            return bad("row index out of range or non-finite coefficient");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvexStatus {
    Optimal,
    PrimalInfeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexSolution {
    pub status: ConvexStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Dual objective; a valid lower bound when `status` is optimal.
    pub dual_objective: f64,
    /// Multipliers aligned with the model's equality rows (zero for rows dropped in presolve).
    pub eq_duals: Vec<f64>,
    /// Nonnegative multipliers of the `≤` rows.
    pub le_duals: Vec<f64>,
    /// Nonnegative multipliers of the quadratic rows.
    pub quad_duals: Vec<f64>,
    /// Multipliers of `x ≥ l` and `x ≤ u`; eliminated fixed variables report zero.
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub iterations: u32,
}

impl ConvexSolution {
    fn status_only(model: &ConvexModel, status: ConvexStatus) -> Self {
        ConvexSolution {
            status,
            x: vec![f64::NAN; model.n],
            objective: f64::NAN,
            dual_objective: f64::NAN,
            eq_duals: vec![0.0; model.equalities.len()],
            le_duals: vec![0.0; model.inequalities.len()],
            quad_duals: vec![0.0; model.quadratic.len()],
            lower_duals: vec![0.0; model.n],
            upper_duals: vec![0.0; model.n],
            iterations: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == ConvexStatus::Optimal
    }

    /// The certified lower bound: the smaller of primal and dual objective.
    pub fn lower_bound(&self) -> f64 {
        self.objective.min(self.dual_objective)
    }
}

/// Result of presolve: the reduced column map and the fixed values.
struct Reduced {
    col: Vec<Option<usize>>,
    fixed: Vec<f64>,
    n: usize,
}

impl Reduced {
    fn new(model: &ConvexModel) -> Self {
        let mut col = vec![None; model.n];
        let mut fixed = vec![0.0; model.n];
        let mut n = 0;
        for j in 0..model.n {
            if model.lower[j] == model.upper[j] {
                fixed[j] = model.lower[j];
            } else {
                col[j] = Some(n);
                n += 1;
            }
        }
        Reduced { col, fixed, n }
    }

    /// Splits `Σ a·x` into free-column coefficients and the fixed constant.
    fn split(&self, coeffs: &[(usize, f64)]) -> (Vec<(usize, f64)>, f64) {
        let mut free = Vec::with_capacity(coeffs.len());
        let mut constant = 0.0;
        for &(j, a) in coeffs {
            match self.col[j] {
                Some(c) => free.push((c, a)),
                None => constant += a * self.fixed[j],
            }
        }
        (free, constant)
    }
}

fn row_max(model: &ConvexModel, coeffs: &[(usize, f64)]) -> f64 {
    coeffs
        .iter()
        .map(|&(j, a)| {
            if a > 0.0 {
                a * model.upper[j]
            } else {
                a * model.lower[j]
            }
        })
        .sum()
}

enum Kind {
    Eq(usize),
    Le(usize),
    Quad(usize),
}

/// Solves `model` to the engine tolerances.
///
/// Stateless and reentrant: concurrent calls on separate models are safe.
pub fn solve_convex(model: &ConvexModel) -> Result<ConvexSolution> {
    model.validate()?;
    for j in 0..model.n {
        if model.lower[j] > model.upper[j] {
            return Ok(ConvexSolution::status_only(
                model,
                ConvexStatus::PrimalInfeasible,
            ));
        }
    }
    let red = Reduced::new(model);

    // Triplets of A, right-hand side b and the cone list, built row by row.
    let mut ai = Vec::new();
    let mut aj = Vec::new();
    let mut av = Vec::new();
    let mut b = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut kinds: Vec<(Kind, usize)> = Vec::new();
    let push_row = |ai: &mut Vec<usize>,
                    aj: &mut Vec<usize>,
                    av: &mut Vec<f64>,
                    b: &mut Vec<f64>,
                    coeffs: &[(usize, f64)],
                    rhs: f64| {
        let r = b.len();
        for &(c, a) in coeffs {
            ai.push(r);
            aj.push(c);
            av.push(a);
        }
        b.push(rhs);
    };

    let mut n_eq = 0;
    for (k, row) in model.equalities.iter().enumerate() {
        let (free, constant) = red.split(&row.coeffs);
        let rhs = row.rhs - constant;
        if free.is_empty() {
            if rhs.abs() > FEAS_TOL * (1.0 + row.rhs.abs()) {
                return Ok(ConvexSolution::status_only(
                    model,
                    ConvexStatus::PrimalInfeasible,
                ));
            }
            continue;
        }
        kinds.push((Kind::Eq(k), b.len()));
        push_row(&mut ai, &mut aj, &mut av, &mut b, &free, rhs);
        n_eq += 1;
    }
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }

    let mut n_le = 0;
    for (k, row) in model.inequalities.iter().enumerate() {
        let (free, constant) = red.split(&row.coeffs);
        let rhs = row.rhs - constant;
        if free.is_empty() {
            if rhs < -FEAS_TOL * (1.0 + row.rhs.abs()) {
                return Ok(ConvexSolution::status_only(
                    model,
                    ConvexStatus::PrimalInfeasible,
                ));
            }
            continue;
        }
        if row_max(model, &row.coeffs) <= row.rhs {
            continue;
        }
        kinds.push((Kind::Le(k), b.len()));
        push_row(&mut ai, &mut aj, &mut av, &mut b, &free, rhs);
        n_le += 1;
    }
    let bound_start = b.len();
    let mut bound_rows = Vec::new();
    for j in 0..model.n {
        let Some(c) = red.col[j] else { continue };
        if model.upper[j].is_finite() {
            bound_rows.push((j, true, b.len()));
            push_row(
                &mut ai,
                &mut aj,
                &mut av,
                &mut b,
                &[(c, 1.0)],
                model.upper[j],
            );
        }
        if model.lower[j].is_finite() {
            bound_rows.push((j, false, b.len()));
            push_row(
                &mut ai,
                &mut aj,
                &mut av,
                &mut b,
                &[(c, -1.0)],
                -model.lower[j],
            );
        }
    }
    n_le += b.len() - bound_start;
    if n_le > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_le));
    }

    for (k, row) in model.quadratic.iter().enumerate() {
        let (lin, lin_const) = red.split(&row.linear);
        let mut sq = Vec::new();
        let mut sq_const = 0.0;
        for &(j, q) in &row.squares {
            match red.col[j] {
                Some(c) if q != 0.0 => sq.push((c, q)),
                Some(_) => {}
                None => sq_const += q * red.fixed[j] * red.fixed[j],
            }
        }
        let rhs = row.rhs - lin_const - sq_const;
        if sq.is_empty() {
            if lin.is_empty() {
                if rhs < -FEAS_TOL * (1.0 + row.rhs.abs()) {
                    return Ok(ConvexSolution::status_only(
                        model,
                        ConvexStatus::PrimalInfeasible,
                    ));
                }
                continue;
            }
            kinds.push((Kind::Le(usize::MAX), b.len()));
            push_row(&mut ai, &mut aj, &mut av, &mut b, &lin, rhs);
            cones.push(SupportedConeT::NonnegativeConeT(1));
            continue;
        }
        kinds.push((Kind::Quad(k), b.len()));
        // s0 = rhs + 1 − a·x, s1 = rhs − 1 − a·x, s_j = 2√q x_j.
        push_row(&mut ai, &mut aj, &mut av, &mut b, &lin, rhs + 1.0);
        push_row(&mut ai, &mut aj, &mut av, &mut b, &lin, rhs - 1.0);
        for &(c, q) in &sq {
            push_row(
                &mut ai,
                &mut aj,
                &mut av,
                &mut b,
                &[(c, -2.0 * q.sqrt())],
                0.0,
            );
        }
        cones.push(SupportedConeT::SecondOrderConeT(2 + sq.len()));
    }

    let mut qvec = vec![0.0; red.n];
    let mut offset = 0.0;
    for &(j, c) in &model.objective {
        match red.col[j] {
            Some(k) => qvec[k] += c,
            None => offset += c * red.fixed[j],
        }
    }
    let mut pdiag = vec![0.0; red.n];
    for &(j, q) in &model.quad_objective {
        match red.col[j] {
            Some(k) => pdiag[k] += q,
            None => offset += 0.5 * q * red.fixed[j] * red.fixed[j],
        }
    }

    let x_full = |xr: &[f64]| -> Vec<f64> {
        (0..model.n)
            .map(|j| match red.col[j] {
                Some(c) => xr[c],
                None => red.fixed[j],
            })
            .collect()
    };

    if red.n == 0 {
        // Everything fixed; the rows were checked above.
        let x = x_full(&[]);
        if model
            .quadratic
            .iter()
            .any(|r| r.residual(&x) > FEAS_TOL * (1.0 + r.rhs.abs()))
        {
            return Ok(ConvexSolution::status_only(
                model,
                ConvexStatus::PrimalInfeasible,
            ));
        }
        let mut sol = ConvexSolution::status_only(model, ConvexStatus::Optimal);
        sol.objective = model.objective_value(&x);
        sol.dual_objective = sol.objective;
        sol.x = x;
        return Ok(sol);
    }

    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, red.n, ai, aj, av);
    let (pi, pv): (Vec<usize>, Vec<f64>) = pdiag
        .iter()
        .enumerate()
        .filter(|(_, &q)| q != 0.0)
        .map(|(k, &q)| (k, q))
        .unzip();
    let p = CscMatrix::new_from_triplets(red.n, red.n, pi.clone(), pi, pv);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(MAX_ITER)
        .tol_feas(FEAS_TOL)
        .tol_gap_abs(GAP_TOL)
        .tol_gap_rel(GAP_TOL)
        .max_threads(1)
        .build()
        .map_err(|e| Error::Solver(format!("settings: {e}")))?;
    let mut solver = DefaultSolver::new(&p, &qvec, &a, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("setup: {e}")))?;
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => ConvexStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            ConvexStatus::PrimalInfeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            ConvexStatus::Unbounded
        }
        _ => ConvexStatus::NumericalFailure,
    };
    if status != ConvexStatus::Optimal {
        let mut out = ConvexSolution::status_only(model, status);
        out.iterations = sol.iterations;
        return Ok(out);
    }

    let x = x_full(&sol.x);
    let objective = sol.obj_val + offset;
    let dual_objective = sol.obj_val_dual + offset;
    let mut out = ConvexSolution::status_only(model, ConvexStatus::Optimal);
    for (kind, r) in &kinds {
        match *kind {
            Kind::Eq(k) => out.eq_duals[k] = sol.z[*r],
            Kind::Le(k) if k != usize::MAX => out.le_duals[k] = sol.z[*r],
            Kind::Le(_) => {}
            // The cone multiplier on `t` recovers the row multiplier.
            Kind::Quad(k) => out.quad_duals[k] = sol.z[*r] + sol.z[*r + 1],
        }
    }
    for &(j, is_upper, r) in &bound_rows {
        if is_upper {
            out.upper_duals[j] = sol.z[r];
        } else {
            out.lower_duals[j] = sol.z[r];
        }
    }
    out.iterations = sol.iterations;
    let gap = (objective - dual_objective).abs();
    let violation = model.max_violation(&x);
    let scale = 1.0 + objective.abs();
    if gap > DUALITY_CHECK * scale || violation > 1e-6 * scale {
        log::debug!(
            "convex solve rejected: gap {gap:.3e}, violation {violation:.3e}, status {:?}",
            sol.status
        );
        out.status = ConvexStatus::NumericalFailure;
    }
    out.x = x;
    out.objective = objective;
    out.dual_objective = dual_objective;
    Ok(out)
}

/// Formats a number into the 12-character fixed-MPS value field.
fn mps_number(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 12 {
        return plain;
    }
    (0..=6)
        .rev()
        .map(|p| format!("{v:.p$e}"))
        .find(|s| s.len() <= 12)
        .unwrap_or_else(|| format!("{v:.0e}"))
}

/// Writes `model` in fixed MPS format.
///
/// Columns are named `X0000000`, `X0000001`, ... by variable index; equality
/// rows `E…`, inequality rows `L…`, quadratic rows `Q…`, objective `OBJ`.
/// The quadratic objective uses a `QUADOBJ` section and quadratic rows use
/// `QCMATRIX` sections, both in the CPLEX convention. Values are rounded to
/// fit the 12-character fields.
pub fn write_mps(model: &ConvexModel, mut w: impl Write) -> Result<()> {
    model.validate()?;
    if model.n > 10_000_000 {
        return Err(Error::Solver("too many columns for fixed MPS names".into()));
    }
    let col = |j: usize| format!("X{j:07}");
    let line2 = |f1: &str, f2: &str, f3: &str, v: f64| {
        format!(" {f1:<2} {f2:<8}  {f3:<8}  {:>12}", mps_number(v))
    };
    writeln!(w, "NAME          TPIA")?;
    writeln!(w, "ROWS")?;
    writeln!(w, " N  OBJ")?;
    let mut rows: Vec<(String, &[(usize, f64)], f64)> = Vec::new();
    for (k, r) in model.equalities.iter().enumerate() {
        let name = format!("E{k:07}");
        writeln!(w, " E  {name}")?;
        rows.push((name, &r.coeffs, r.rhs));
    }
    for (k, r) in model.inequalities.iter().enumerate() {
        let name = format!("L{k:07}");
        writeln!(w, " L  {name}")?;
        rows.push((name, &r.coeffs, r.rhs));
    }
    for (k, r) in model.quadratic.iter().enumerate() {
        let name = format!("Q{k:07}");
        writeln!(w, " L  {name}")?;
        rows.push((name, &r.linear, r.rhs));
    }

    let mut by_col: Vec<Vec<(String, f64)>> = vec![Vec::new(); model.n];
    for &(j, c) in &model.objective {
        by_col[j].push(("OBJ".to_string(), c));
    }
    for (name, coeffs, _) in &rows {
        for &(j, a) in coeffs.iter() {
            by_col[j].push((name.clone(), a));
        }
    }
    writeln!(w, "COLUMNS")?;
    for (j, entries) in by_col.iter().enumerate() {
        if entries.is_empty() {
            // Keep every column declared.
            writeln!(w, "{}", line2("", &col(j), "OBJ", 0.0))?;
        }
        for (row, a) in entries {
            writeln!(w, "{}", line2("", &col(j), row, *a))?;
        }
    }
    writeln!(w, "RHS")?;
    for (name, _, rhs) in &rows {
        if *rhs != 0.0 {
            writeln!(w, "{}", line2("", "RHS", name, *rhs))?;
        }
    }
    writeln!(w, "BOUNDS")?;
    for j in 0..model.n {
        let (l, u) = (model.lower[j], model.upper[j]);
        let c = col(j);
        if l == u {
            writeln!(w, "{}", line2("FX", "BND", &c, l))?;
            continue;
        }
        match (l.is_finite(), u.is_finite()) {
            (false, false) => writeln!(w, " FR BND       {c}")?,
            (false, true) => {
                writeln!(w, " MI BND       {c}")?;
                writeln!(w, "{}", line2("UP", "BND", &c, u))?;
            }
            (true, up) => {
                writeln!(w, "{}", line2("LO", "BND", &c, l))?;
                if up {
                    writeln!(w, "{}", line2("UP", "BND", &c, u))?;
                }
            }
        }
    }
    if !model.quad_objective.is_empty() {
        writeln!(w, "QUADOBJ")?;
        for &(j, q) in &model.quad_objective {
            writeln!(w, "{}", line2("", &col(j), &col(j), q))?;
        }
    }
    for (k, r) in model.quadratic.iter().enumerate() {
        writeln!(w, "QCMATRIX   Q{k:07}")?;
        for &(j, q) in &r.squares {
            writeln!(w, "{}", line2("", &col(j), &col(j), q))?;
        }
    }
    writeln!(w, "ENDATA")?;
    Ok(())
}

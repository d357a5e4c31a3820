//! Local primal-dual interior-point solver for the bilinear system.
//!
//! Solves
//!
//! ```text
//! min f(x)  s.t.  A x = b,  z_k − x_i x_j = 0,  d(x) ≤ 0,  l ≤ x ≤ u
//! ```
//!
//! where `d` collects the linear `≤` rows and the convex quadratic rows.
//! Each inequality gets a slack `s > 0` with `d(x) + s = 0`; bounds and
//! slacks carry log barriers. Newton steps on the perturbed KKT conditions
//! use the reduced symmetric system
//!
//! ```text
//! [ H + Σ + δw I   Jcᵀ     Jdᵀ    ] [dx]   [ −∇f − Jcᵀy − Jdᵀw + μ/(x−l) − μ/(u−x) ]
//! [ Jc             −δc I   0      ] [dy] = [ −c(x)                                 ]
//! [ Jd             0       −S W⁻¹ ] [dw]   [ −d(x) − μ/w                           ]
//! ```
//!
//! factored by LDLᵀ with inertia checking; `δw` grows from 1e-8 by ×10
//! until the matrix has exactly `n` positive pivots. Steps follow the
//! fraction-to-boundary rule and an ℓ1-merit backtracking search.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::qdldl::{QDLDLFactorisation, QDLDLSettingsBuilder};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feeder::Network;
use crate::formulation::{
    assemble_point, nominal_voltages, Bilinear, Bounds, ConstraintSystem, VariableSpace,
};
use crate::rows::{LinearRow, QuadRow};

#[derive(Debug, Clone, Serialize)]
pub struct LocalOptions {
    pub tol: f64,
    pub mu_init: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary parameter.
    pub tau: f64,
    /// Re-solve with sources pinned at zero when the objective is already tiny.
    pub zero_source_polish: bool,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            tol: 1e-7,
            mu_init: 1e-3,
            max_iter: 500,
            tau: 0.995,
            zero_source_polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalStatus {
    Converged,
    MaxIters,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct KktResiduals {
    /// ‖∇ₓL‖∞, unscaled.
    pub stationarity: f64,
    /// Largest equality residual or inequality excess.
    pub feasibility: f64,
    /// Largest complementarity product.
    pub complementarity: f64,
}

/// Multipliers aligned with the constraint system.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Multipliers {
    pub equalities: Vec<f64>,
    pub bilinear: Vec<f64>,
    pub inequalities: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(system: &ConstraintSystem) -> Self {
        Multipliers {
            equalities: vec![0.0; system.equalities.len()],
            bilinear: vec![0.0; system.bilinear.len()],
            inequalities: vec![0.0; system.inequalities.len()],
            quadratic: vec![0.0; system.quadratic.len()],
            lower: vec![0.0; system.n_vars],
            upper: vec![0.0; system.n_vars],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub residuals: KktResiduals,
    #[serde(skip)]
    pub multipliers: Multipliers,
    pub iterations: usize,
    pub status: LocalStatus,
    /// Constraint-violation ∞-norm over rows and bounds.
    pub max_violation: f64,
    pub polished: bool,
    pub seconds: f64,
}

impl LocalSolution {
    pub fn is_converged(&self) -> bool {
        self.status == LocalStatus::Converged
    }
}

/// Flat start: nominal voltages, consistent lifted values, zero sources.
pub fn flat_start(
    space: &VariableSpace,
    system: &ConstraintSystem,
    net: &Network,
) -> Result<Vec<f64>> {
    let mut x = assemble_point(space, system, net, &nominal_voltages(net))?;
    for npv in &space.node_phases {
        if let Some(src) = npv.source {
            for j in src.indices() {
                x[j] = 0.0;
            }
        }
    }
    Ok(x)
}

/// `L(x) = f + Σyc + Σw·d − Σz_l(x−l) − Σz_u(u−x)` over finite bounds.
pub fn lagrangian(system: &ConstraintSystem, bounds: &Bounds, x: &[f64], m: &Multipliers) -> f64 {
    let mut v = system.objective.value(x);
    v += dot_rows(&system.equalities, &m.equalities, x);
    v += system
        .bilinear
        .iter()
        .zip(&m.bilinear)
        .map(|(t, y)| y * t.residual(x))
        .sum::<f64>();
    v += dot_rows(&system.inequalities, &m.inequalities, x);
    v += system
        .quadratic
        .iter()
        .zip(&m.quadratic)
        .map(|(r, w)| w * r.residual(x))
        .sum::<f64>();
    for j in 0..x.len() {
        if bounds.lower[j].is_finite() {
            v -= m.lower[j] * (x[j] - bounds.lower[j]);
        }
        if bounds.upper[j].is_finite() {
            v -= m.upper[j] * (bounds.upper[j] - x[j]);
        }
    }
    v
}

fn dot_rows(rows: &[LinearRow], mult: &[f64], x: &[f64]) -> f64 {
    rows.iter().zip(mult).map(|(r, y)| y * r.residual(x)).sum()
}

/// Analytic `∇ₓL` matching [`lagrangian`].
pub fn lagrangian_gradient(
    system: &ConstraintSystem,
    bounds: &Bounds,
    x: &[f64],
    m: &Multipliers,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    system.objective.add_gradient(x, &mut g);
    for (r, y) in system.equalities.iter().zip(&m.equalities) {
        for &(j, a) in &r.coeffs {
            g[j] += y * a;
        }
    }
    for (t, y) in system.bilinear.iter().zip(&m.bilinear) {
        add_bilinear_gradient(t, *y, x, &mut g);
    }
    for (r, w) in system.inequalities.iter().zip(&m.inequalities) {
        for &(j, a) in &r.coeffs {
            g[j] += w * a;
        }
    }
    for (r, w) in system.quadratic.iter().zip(&m.quadratic) {
        for (j, d) in r.gradient(x) {
            g[j] += w * d;
        }
    }
    for j in 0..x.len() {
        if bounds.lower[j].is_finite() {
            g[j] -= m.lower[j];
        }
        if bounds.upper[j].is_finite() {
            g[j] += m.upper[j];
        }
    }
    g
}

fn add_bilinear_gradient(t: &Bilinear, y: f64, x: &[f64], g: &mut [f64]) {
    g[t.aux] += y;
    if t.is_square() {
        g[t.left] -= 2.0 * y * x[t.left];
    } else {
        g[t.left] -= y * x[t.right];
        g[t.right] -= y * x[t.left];
    }
}

/// Equality constraint in the solver's own numbering.
enum Eq<'a> {
    Linear(&'a LinearRow, usize),
    Bilinear(Bilinear, usize),
}

enum Ineq<'a> {
    Linear(&'a LinearRow, usize),
    Quad(&'a QuadRow, usize),
}

struct Problem<'a> {
    system: &'a ConstraintSystem,
    /// Free (non-fixed) variable → position in the reduced vector.
    col: Vec<Option<usize>>,
    free: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eqs: Vec<Eq<'a>>,
    ineqs: Vec<Ineq<'a>>,
}

impl<'a> Problem<'a> {
    fn new(system: &'a ConstraintSystem, bounds: &Bounds, x: &[f64]) -> Result<Self> {
        let n = system.n_vars;
        let mut col = vec![None; n];
        let mut free = Vec::new();
        for j in 0..n {
            if bounds.lower[j] > bounds.upper[j] {
                return Err(Error::Solver(format!("empty bound on variable {j}")));
            }
            if bounds.lower[j] < bounds.upper[j] {
                col[j] = Some(free.len());
                free.push(j);
            }
        }
        let has_free =
            |mut cols: Box<dyn Iterator<Item = usize> + '_>| cols.any(|j| col[j].is_some());
        let mut eqs = Vec::new();
        for (k, r) in system.equalities.iter().enumerate() {
            if has_free(Box::new(r.coeffs.iter().map(|c| c.0))) {
                eqs.push(Eq::Linear(r, k));
            } else if r.residual(x).abs() > 1e-9 * (1.0 + r.rhs.abs()) {
                return Err(Error::Solver(format!(
                    "equality row {k} violated by fixed variables"
                )));
            }
        }
        for (k, t) in system.bilinear.iter().enumerate() {
            if has_free(Box::new([t.aux, t.left, t.right].into_iter())) {
                eqs.push(Eq::Bilinear(*t, k));
            } else if t.residual(x).abs() > 1e-9 {
                return Err(Error::Solver(format!(
                    "bilinear term {k} violated by fixed variables"
                )));
            }
        }
        let mut ineqs = Vec::new();
        for (k, r) in system.inequalities.iter().enumerate() {
            if has_free(Box::new(r.coeffs.iter().map(|c| c.0))) {
                ineqs.push(Ineq::Linear(r, k));
            }
        }
        for (k, r) in system.quadratic.iter().enumerate() {
            if has_free(Box::new(r.squares.iter().chain(&r.linear).map(|c| c.0))) {
                ineqs.push(Ineq::Quad(r, k));
            }
        }
        Ok(Problem {
            system,
            col,
            free,
            lower: bounds.lower.clone(),
            upper: bounds.upper.clone(),
            eqs,
            ineqs,
        })
    }

    fn eq_value(&self, e: &Eq, x: &[f64]) -> f64 {
        match e {
            Eq::Linear(r, _) => r.residual(x),
            Eq::Bilinear(t, _) => t.residual(x),
        }
    }

    fn ineq_value(&self, d: &Ineq, x: &[f64]) -> f64 {
        match d {
            Ineq::Linear(r, _) => r.residual(x),
            Ineq::Quad(r, _) => r.residual(x),
        }
    }

    /// Gradient entries over the reduced columns.
    fn eq_grad(&self, e: &Eq, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match e {
            Eq::Linear(r, _) => out.extend(r.coeffs.iter().copied()),
            Eq::Bilinear(t, _) => {
                out.push((t.aux, 1.0));
                if t.is_square() {
                    out.push((t.left, -2.0 * x[t.left]));
                } else {
                    out.push((t.left, -x[t.right]));
                    out.push((t.right, -x[t.left]));
                }
            }
        }
        self.reduce(out);
    }

    fn ineq_grad(&self, d: &Ineq, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        match d {
            Ineq::Linear(r, _) => out.extend(r.coeffs.iter().copied()),
            Ineq::Quad(r, _) => out.extend(r.gradient(x)),
        }
        self.reduce(out);
    }

    fn reduce(&self, out: &mut Vec<(usize, f64)>) {
        out.retain_mut(|(j, _)| match self.col[*j] {
            Some(c) => {
                *j = c;
                true
            }
            None => false,
        });
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.system.objective.value(x)
    }
}

struct State {
    x: Vec<f64>,
    s: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

/// Barrier-problem error measures, IPOPT-style scaled.
struct Errors {
    stationarity: f64,
    stationarity_raw: f64,
    feasibility: f64,
    complementarity: f64,
    complementarity_raw: f64,
}

impl Errors {
    fn total(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
    }
}

const S_MAX: f64 = 100.0;
const KAPPA_SIGMA: f64 = 1e10;
const DELTA_C: f64 = 1e-10;

struct Solver<'a> {
    p: Problem<'a>,
    opts: LocalOptions,
    grad_buf: Vec<(usize, f64)>,
    last_delta_w: f64,
}

impl<'a> Solver<'a> {
    fn nf(&self) -> usize {
        self.p.free.len()
    }

    fn finite_lower(&self, k: usize) -> Option<f64> {
        let l = self.p.lower[self.p.free[k]];
        l.is_finite().then_some(l)
    }

    fn finite_upper(&self, k: usize) -> Option<f64> {
        let u = self.p.upper[self.p.free[k]];
        u.is_finite().then_some(u)
    }

    /// Reduced gradient of `f + Jcᵀy + Jdᵀw`.
    fn grad_lagr_no_bounds(&mut self, st: &State) -> Vec<f64> {
        let mut full = vec![0.0; self.p.system.n_vars];
        self.p.system.objective.add_gradient(&st.x, &mut full);
        let mut g: Vec<f64> = self.p.free.iter().map(|&j| full[j]).collect();
        let mut buf = std::mem::take(&mut self.grad_buf);
        for (e, y) in self.p.eqs.iter().zip(&st.y) {
            self.p.eq_grad(e, &st.x, &mut buf);
            for &(c, a) in &buf {
                g[c] += y * a;
            }
        }
        for (d, w) in self.p.ineqs.iter().zip(&st.w) {
            self.p.ineq_grad(d, &st.x, &mut buf);
            for &(c, a) in &buf {
                g[c] += w * a;
            }
        }
        self.grad_buf = buf;
        g
    }

    fn errors(&mut self, st: &State, mu: f64) -> Errors {
        let mut g = self.grad_lagr_no_bounds(st);
        for k in 0..self.nf() {
            g[k] += st.zu[k] - st.zl[k];
        }
        let stat = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let mut feas = 0.0_f64;
        for e in &self.p.eqs {
            feas = feas.max(self.p.eq_value(e, &st.x).abs());
        }
        for (d, s) in self.p.ineqs.iter().zip(&st.s) {
            feas = feas.max((self.p.ineq_value(d, &st.x) + s).abs());
        }
        let mut comp = 0.0_f64;
        let mut comp_raw = 0.0_f64;
        for k in 0..self.nf() {
            let xj = st.x[self.p.free[k]];
            if let Some(l) = self.finite_lower(k) {
                comp = comp.max(((xj - l) * st.zl[k] - mu).abs());
                comp_raw = comp_raw.max((xj - l) * st.zl[k]);
            }
            if let Some(u) = self.finite_upper(k) {
                comp = comp.max(((u - xj) * st.zu[k] - mu).abs());
                comp_raw = comp_raw.max((u - xj) * st.zu[k]);
            }
        }
        for (s, w) in st.s.iter().zip(&st.w) {
            comp = comp.max((s * w - mu).abs());
            comp_raw = comp_raw.max(s * w);
        }
        let l1 = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>();
        let nz = st.zl.len() + st.zu.len() + st.w.len();
        let nm = nz + st.y.len();
        let zsum = l1(&st.zl) + l1(&st.zu) + l1(&st.w);
        let sd = (S_MAX.max((zsum + l1(&st.y)) / nm.max(1) as f64)) / S_MAX;
        let sc = (S_MAX.max(zsum / nz.max(1) as f64)) / S_MAX;
        Errors {
            stationarity: stat / sd,
            stationarity_raw: stat,
            feasibility: feas,
            complementarity: comp / sc,
            complementarity_raw: comp_raw,
        }
    }

    fn merit(&self, x: &[f64], s: &[f64], mu: f64, nu: f64) -> f64 {
        let mut phi = self.p.objective(x);
        for k in 0..self.nf() {
            let xj = x[self.p.free[k]];
            if let Some(l) = self.finite_lower(k) {
                phi -= mu * (xj - l).ln();
            }
            if let Some(u) = self.finite_upper(k) {
                phi -= mu * (u - xj).ln();
            }
        }
        for &sv in s {
            phi -= mu * sv.ln();
        }
        phi + nu * self.infeasibility_l1(x, s)
    }

    fn infeasibility_l1(&self, x: &[f64], s: &[f64]) -> f64 {
        let eq: f64 = self.p.eqs.iter().map(|e| self.p.eq_value(e, x).abs()).sum();
        let iq: f64 = self
            .p
            .ineqs
            .iter()
            .zip(s)
            .map(|(d, sv)| (self.p.ineq_value(d, x) + sv).abs())
            .sum();
        eq + iq
    }

    /// Upper-triangular KKT matrix triplets for the current iterate.
    fn kkt(&mut self, st: &State, sigma: &[f64], delta_w: f64, delta_c: f64) -> CscMatrix<f64> {
        let nf = self.nf();
        let me = self.p.eqs.len();
        let mi = self.p.ineqs.len();
        let dim = nf + me + mi;
        let mut ri = Vec::new();
        let mut ci = Vec::new();
        let mut vv = Vec::new();
        let mut push = |r: usize, c: usize, v: f64| {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            ri.push(r);
            ci.push(c);
            vv.push(v);
        };
        let mut diag = vec![0.0; nf];
        for (k, d) in diag.iter_mut().enumerate() {
            *d = sigma[k] + delta_w;
        }
        for &(j, q) in &self.p.system.objective.quadratic {
            if let Some(c) = self.p.col[j] {
                diag[c] += q;
            }
        }
        for (e, y) in self.p.eqs.iter().zip(&st.y) {
            if let Eq::Bilinear(t, _) = e {
                if t.is_square() {
                    if let Some(c) = self.p.col[t.left] {
                        diag[c] -= 2.0 * y;
                    }
                } else if let (Some(a), Some(b)) = (self.p.col[t.left], self.p.col[t.right]) {
                    push(a, b, -y);
                }
            }
        }
        for (d, w) in self.p.ineqs.iter().zip(&st.w) {
            if let Ineq::Quad(r, _) = d {
                for &(j, q) in &r.squares {
                    if let Some(c) = self.p.col[j] {
                        diag[c] += 2.0 * q * w;
                    }
                }
            }
        }
        for (k, &d) in diag.iter().enumerate() {
            push(k, k, d);
        }
        let mut buf = std::mem::take(&mut self.grad_buf);
        for (r, e) in self.p.eqs.iter().enumerate() {
            self.p.eq_grad(e, &st.x, &mut buf);
            for &(c, a) in &buf {
                push(c, nf + r, a);
            }
            push(nf + r, nf + r, -delta_c);
        }
        for (r, d) in self.p.ineqs.iter().enumerate() {
            self.p.ineq_grad(d, &st.x, &mut buf);
            for &(c, a) in &buf {
                push(c, nf + me + r, a);
            }
            push(nf + me + r, nf + me + r, -st.s[r] / st.w[r] - delta_c);
        }
        self.grad_buf = buf;
        CscMatrix::new_from_triplets(dim, dim, ri, ci, vv)
    }

    /// Factors the KKT matrix with inertia correction.
    fn factor(&mut self, st: &State, sigma: &[f64]) -> Result<QDLDLFactorisation<f64>> {
        let nf = self.nf();
        let settings = QDLDLSettingsBuilder::default()
            .regularize_enable(false)
            .build()
            .map_err(|e| Error::Solver(format!("qdldl settings: {e}")))?;
        let mut delta_w = 0.0;
        let mut delta_c = DELTA_C;
        loop {
            let m = self.kkt(st, sigma, delta_w, delta_c);
            match QDLDLFactorisation::new(&m, Some(settings.clone())) {
                Ok(f) if f.positive_inertia() == nf => {
                    self.last_delta_w = delta_w;
                    return Ok(f);
                }
                Ok(_) => {}
                Err(_) => delta_c = (delta_c * 10.0).min(1e-4),
            }
            delta_w = if delta_w == 0.0 {
                (self.last_delta_w / 10.0).max(1e-8)
            } else {
                delta_w * 10.0
            };
            if delta_w > 1e40 {
                return Err(Error::Solver("inertia correction failed".into()));
            }
        }
    }

    fn run(&mut self, x0: &[f64]) -> Result<(State, usize, LocalStatus, Errors)> {
        let nf = self.nf();
        let tau = self.opts.tau;
        let tol = self.opts.tol;
        let mu_min = tol / 10.0;
        let mut mu = self.opts.mu_init;

        // Push the start strictly inside the bounds.
        let mut x = x0.to_vec();
        for k in 0..nf {
            let j = self.p.free[k];
            let (l, u) = (self.p.lower[j], self.p.upper[j]);
            let width = u - l;
            if l.is_finite() {
                let push = (1e-2 * l.abs().max(1.0)).min(if width.is_finite() {
                    1e-2 * width
                } else {
                    f64::INFINITY
                });
                x[j] = x[j].max(l + push);
            }
            if u.is_finite() {
                let push = (1e-2 * u.abs().max(1.0)).min(if width.is_finite() {
                    1e-2 * width
                } else {
                    f64::INFINITY
                });
                x[j] = x[j].min(u - push);
            }
        }
        let s: Vec<f64> = self
            .p
            .ineqs
            .iter()
            .map(|d| (-self.p.ineq_value(d, &x)).max(1e-2))
            .collect();
        let mut st = State {
            w: s.iter().map(|sv| mu / sv).collect(),
            s,
            y: vec![0.0; self.p.eqs.len()],
            zl: (0..nf)
                .map(|k| {
                    self.finite_lower(k)
                        .map_or(0.0, |l| mu / (x[self.p.free[k]] - l))
                })
                .collect(),
            zu: (0..nf)
                .map(|k| {
                    self.finite_upper(k)
                        .map_or(0.0, |u| mu / (u - x[self.p.free[k]]))
                })
                .collect(),
            x,
        };
        let mut nu = 1.0_f64;

        for iter in 0..self.opts.max_iter {
            let err0 = self.errors(&st, 0.0);
            if err0.total() <= tol {
                return Ok((st, iter, LocalStatus::Converged, err0));
            }
            loop {
                let e = self.errors(&st, mu);
                if e.total() > 10.0 * mu || mu <= mu_min {
                    break;
                }
                mu = mu_min.max((0.2 * mu).min(mu.powf(1.5)));
            }

            // Σ and the right-hand side.
            let me = self.p.eqs.len();
            let mi = self.p.ineqs.len();
            let mut sigma = vec![0.0; nf];
            let mut rhs = vec![0.0; nf + me + mi];
            let g = self.grad_lagr_no_bounds(&st);
            for k in 0..nf {
                let xj = st.x[self.p.free[k]];
                rhs[k] = -g[k];
                if let Some(l) = self.finite_lower(k) {
                    sigma[k] += st.zl[k] / (xj - l);
                    rhs[k] += mu / (xj - l);
                }
                if let Some(u) = self.finite_upper(k) {
                    sigma[k] += st.zu[k] / (u - xj);
                    rhs[k] -= mu / (u - xj);
                }
            }
            for (r, e) in self.p.eqs.iter().enumerate() {
                rhs[nf + r] = -self.p.eq_value(e, &st.x);
            }
            for (r, d) in self.p.ineqs.iter().enumerate() {
                rhs[nf + me + r] = -self.p.ineq_value(d, &st.x) - mu / st.w[r];
            }
            let mut fac = self.factor(&st, &sigma)?;
            let mut sol = rhs.clone();
            fac.solve(&mut sol);
            let dx = &sol[..nf];
            let dy = &sol[nf..nf + me];
            let dw = &sol[nf + me..];
            let ds: Vec<f64> = (0..mi)
                .map(|r| mu / st.w[r] - st.s[r] - st.s[r] / st.w[r] * dw[r])
                .collect();
            let mut dzl = vec![0.0; nf];
            let mut dzu = vec![0.0; nf];
            for k in 0..nf {
                let xj = st.x[self.p.free[k]];
                if let Some(l) = self.finite_lower(k) {
                    dzl[k] = mu / (xj - l) - st.zl[k] - st.zl[k] / (xj - l) * dx[k];
                }
                if let Some(u) = self.finite_upper(k) {
                    dzu[k] = mu / (u - xj) - st.zu[k] + st.zu[k] / (u - xj) * dx[k];
                }
            }

            // Fraction to the boundary.
            let mut alpha_p = 1.0_f64;
            let mut alpha_d = 1.0_f64;
            let ftb = |v: f64, dv: f64, a: &mut f64| {
                if dv < 0.0 {
                    *a = a.min(-tau * v / dv);
                }
            };
            for k in 0..nf {
                let xj = st.x[self.p.free[k]];
                if let Some(l) = self.finite_lower(k) {
                    ftb(xj - l, dx[k], &mut alpha_p);
                    ftb(st.zl[k], dzl[k], &mut alpha_d);
                }
                if let Some(u) = self.finite_upper(k) {
                    ftb(u - xj, -dx[k], &mut alpha_p);
                    ftb(st.zu[k], dzu[k], &mut alpha_d);
                }
            }
            for r in 0..mi {
                ftb(st.s[r], ds[r], &mut alpha_p);
                ftb(st.w[r], dw[r], &mut alpha_d);
            }

            // ℓ1-merit backtracking.
            let ymax =
                st.y.iter()
                    .zip(dy)
                    .map(|(y, d)| (y + d).abs())
                    .chain(st.w.iter().zip(dw).map(|(w, d)| (w + d).abs()))
                    .fold(0.0, f64::max);
            nu = nu.max(1.1 * ymax);
            let mut full_g = vec![0.0; self.p.system.n_vars];
            self.p.system.objective.add_gradient(&st.x, &mut full_g);
            let mut dphi = 0.0;
            for k in 0..nf {
                let xj = st.x[self.p.free[k]];
                let mut gk = full_g[self.p.free[k]];
                if let Some(l) = self.finite_lower(k) {
                    gk -= mu / (xj - l);
                }
                if let Some(u) = self.finite_upper(k) {
                    gk += mu / (u - xj);
                }
                dphi += gk * dx[k];
            }
            for r in 0..mi {
                dphi -= mu / st.s[r] * ds[r];
            }
            let infeas = self.infeasibility_l1(&st.x, &st.s);
            dphi -= nu * infeas;
            let phi0 = self.merit(&st.x, &st.s, mu, nu);
            let trial_x = |a: f64| {
                let mut xt = st.x.clone();
                for k in 0..nf {
                    xt[self.p.free[k]] += a * dx[k];
                }
                xt
            };
            let mut alpha = alpha_p;
            let mut accepted = false;
            for _ in 0..40 {
                let xt = trial_x(alpha);
                let stt: Vec<f64> = (0..mi).map(|r| st.s[r] + alpha * ds[r]).collect();
                let phi = self.merit(&xt, &stt, mu, nu);
                if phi.is_finite() && (dphi >= 0.0 || phi <= phi0 + 1e-4 * alpha * dphi) {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Take a short step anyway; the barrier update may unlock progress.
                alpha = alpha_p * 1e-3;
            }
            let alpha_dual = alpha_d;
            for k in 0..nf {
                st.x[self.p.free[k]] += alpha * dx[k];
            }
            for r in 0..mi {
                st.s[r] += alpha * ds[r];
                st.w[r] += alpha_dual * dw[r];
            }
            for (y, d) in st.y.iter_mut().zip(dy) {
                *y += alpha * d;
            }
            for k in 0..nf {
                let xj = st.x[self.p.free[k]];
                if let Some(l) = self.finite_lower(k) {
                    let z = st.zl[k] + alpha_dual * dzl[k];
                    let c = mu / (xj - l);
                    st.zl[k] = z.clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
                }
                if let Some(u) = self.finite_upper(k) {
                    let z = st.zu[k] + alpha_dual * dzu[k];
                    let c = mu / (u - xj);
                    st.zu[k] = z.clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
                }
            }
            for r in 0..mi {
                let c = mu / st.s[r];
                st.w[r] = st.w[r].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
            }
            if st.x.iter().any(|v| !v.is_finite()) {
                let e = self.errors(&st, 0.0);
                return Ok((st, iter + 1, LocalStatus::Failed, e));
            }
            log::trace!(
                "ipm iter {iter}: f={:.6e} mu={mu:.1e} alpha={alpha:.2e} inf={infeas:.2e} dw={:.0e}",
                self.p.objective(&st.x),
                self.last_delta_w
            );
        }
        let e = self.errors(&st, 0.0);
        Ok((st, self.opts.max_iter, LocalStatus::MaxIters, e))
    }
}

fn unpack(p: &Problem, st: &State) -> Multipliers {
    let mut m = Multipliers::zeros(p.system);
    for (e, y) in p.eqs.iter().zip(&st.y) {
        match e {
            Eq::Linear(_, k) => m.equalities[*k] = *y,
            Eq::Bilinear(_, k) => m.bilinear[*k] = *y,
        }
    }
    for (d, w) in p.ineqs.iter().zip(&st.w) {
        match d {
            Ineq::Linear(_, k) => m.inequalities[*k] = *w,
            Ineq::Quad(_, k) => m.quadratic[*k] = *w,
        }
    }
    for (k, &j) in p.free.iter().enumerate() {
        if p.lower[j].is_finite() {
            m.lower[j] = st.zl[k];
        }
        if p.upper[j].is_finite() {
            m.upper[j] = st.zu[k];
        }
    }
    m
}

fn bounds_violation(bounds: &Bounds, x: &[f64]) -> f64 {
    (0..x.len())
        .map(|j| {
            (bounds.lower[j] - x[j])
                .max(x[j] - bounds.upper[j])
                .max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Objective below which a zero-source re-solve is attempted.
pub const POLISH_TRIGGER: f64 = 1e-5;

fn solve_once(
    system: &ConstraintSystem,
    bounds: &Bounds,
    x0: &[f64],
    opts: &LocalOptions,
) -> Result<LocalSolution> {
    let start = Instant::now();
    let mut x = x0.to_vec();
    for j in 0..x.len() {
        if bounds.lower[j] == bounds.upper[j] {
            x[j] = bounds.lower[j];
        }
    }
    let p = Problem::new(system, bounds, &x)?;
    let mut solver = Solver {
        p,
        opts: opts.clone(),
        grad_buf: Vec::new(),
        last_delta_w: 0.0,
    };

    // Already a KKT point with zero multipliers?
    let zero = Multipliers::zeros(system);
    let g = lagrangian_gradient(system, bounds, &x, &zero);
    let stat0 = solver
        .p
        .free
        .iter()
        .map(|&j| g[j].abs())
        .fold(0.0, f64::max);
    let viol0 = system.max_violation(&x).max(bounds_violation(bounds, &x));
    if stat0 <= opts.tol && viol0 <= opts.tol {
        return Ok(LocalSolution {
            objective: system.objective.value(&x),
            x,
            residuals: KktResiduals {
                stationarity: stat0,
                feasibility: viol0,
                complementarity: 0.0,
            },
            multipliers: zero,
            iterations: 0,
            status: LocalStatus::Converged,
            max_violation: viol0,
            polished: false,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let (st, iterations, status, err) = solver.run(&x)?;
    let multipliers = unpack(&solver.p, &st);
    let x = st.x;
    let max_violation = system.max_violation(&x).max(bounds_violation(bounds, &x));
    Ok(LocalSolution {
        objective: system.objective.value(&x),
        residuals: KktResiduals {
            stationarity: err.stationarity_raw,
            feasibility: err.feasibility,
            complementarity: err.complementarity_raw,
        },
        x,
        multipliers,
        iterations,
        status,
        max_violation,
        polished: false,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Locally solves the bilinear program from `init` (or `x0`), within `bounds`.
///
/// When the converged objective is below [`POLISH_TRIGGER`], the solve is
/// repeated from the result with every source pinned at zero; if that
/// converges, it is the reported solution (a power-flow solution with
/// objective exactly zero). Barrier terms keep L1 split sources near `μ/z`,
/// so a feasible network can otherwise stall at a small positive value.
pub fn solve_local(
    system: &ConstraintSystem,
    bounds: &Bounds,
    source_vars: &[usize],
    x0: &[f64],
    opts: &LocalOptions,
) -> Result<LocalSolution> {
    let mut sol = solve_once(system, bounds, x0, opts)?;
    if sol.is_converged()
        && opts.zero_source_polish
        && sol.objective > 0.0
        && sol.objective <= POLISH_TRIGGER
    {
        let mut pinned = bounds.clone();
        for &j in source_vars {
            if pinned.lower[j] <= 0.0 && 0.0 <= pinned.upper[j] {
                pinned.lower[j] = 0.0;
                pinned.upper[j] = 0.0;
            }
        }
        let polish_opts = LocalOptions {
            max_iter: opts.max_iter.min(100),
            ..opts.clone()
        };
        match solve_once(system, &pinned, &sol.x, &polish_opts) {
            Ok(p) if p.is_converged() && p.max_violation <= opts.tol => {
                log::debug!(
                    "zero-source polish accepted after {} iterations",
                    p.iterations
                );
                let iterations = sol.iterations + p.iterations;
                sol = LocalSolution {
                    iterations,
                    polished: true,
                    ..p
                };
            }
            Ok(p) => log::debug!("zero-source polish rejected: {:?}", p.status),
            Err(e) => log::debug!("zero-source polish failed: {e}"),
        }
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::parse_feeder;
    use crate::formulation::{build, evaluate_residual, initial_bounds, voltages_from_point, Norm};

    pub(crate) const TWO_NODE: &str = r#"{
        "base_power_va": 1e6, "base_voltage_v": 7200,
        "nodes": [
            {"id": "s", "phases": ["a"], "kind": "slack"},
            {"id": "n", "phases": ["a"], "kind": "load",
             "loads": {"a": {"p_kw": 500, "q_kvar": 100}}}
        ],
        "lines": [{"from": "s", "to": "n", "phases": ["a"],
                   "y_series_pu": {"re": [[2.0]], "im": [[-4.0]]}}]
    }"#;

    fn sources(space: &VariableSpace) -> Vec<usize> {
        space
            .node_phases
            .iter()
            .filter_map(|n| n.source)
            .flat_map(|s| s.indices())
            .collect()
    }

    fn solve(text: &str, norm: Norm) -> (Network, VariableSpace, ConstraintSystem, LocalSolution) {
        let net = parse_feeder(text).unwrap();
        let (space, system) = build(&net, norm).unwrap();
        let b = initial_bounds(&space, &net, 0.25).unwrap();
        let x0 = flat_start(&space, &system, &net).unwrap();
        let sol =
            solve_local(&system, &b, &sources(&space), &x0, &LocalOptions::default()).unwrap();
        (net, space, system, sol)
    }

    #[test]
    fn zero_load_converges_immediately() {
        let text = TWO_NODE.replace(r#""p_kw": 500, "q_kvar": 100"#, r#""p_kw": 0"#);
        let (_, _, _, sol) = solve(&text, Norm::L2);
        assert_eq!(sol.status, LocalStatus::Converged);
        assert!(sol.iterations <= 2);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn feasible_two_node_reaches_zero() {
        for norm in [Norm::L1, Norm::L2] {
            let (net, space, _, sol) = solve(TWO_NODE, norm);
            assert!(sol.is_converged(), "{norm}: {:?}", sol.status);
            assert!(sol.objective <= 1e-8, "{norm}: {}", sol.objective);
            assert!(sol.max_violation <= 1e-7);
            let v = voltages_from_point(&space, &net, &sol.x);
            let r = evaluate_residual(&net, &v).unwrap();
            assert!(r.sources[0].norm() < 1e-6);
        }
    }

    #[test]
    fn infeasible_two_node_has_positive_objective() {
        let text = TWO_NODE.replace("500", "3000").replace("100}", "1500}");
        for norm in [Norm::L1, Norm::L2] {
            let (net, space, system, sol) = solve(&text, norm);
            assert!(sol.is_converged(), "{norm}: {:?}", sol.status);
            assert!(sol.objective > 1e-3);
            assert!(
                sol.residuals.stationarity <= 1e-6,
                "{}",
                sol.residuals.stationarity
            );
            // Objective equals the directly evaluated residual at the returned voltages.
            let v = voltages_from_point(&space, &net, &sol.x);
            let r = evaluate_residual(&net, &v).unwrap();
            assert!((r.objective(norm) - sol.objective).abs() <= 1e-6 * sol.objective);
            assert!(system.max_bilinear_residual(&sol.x) <= 1e-7);
        }
    }

    #[test]
    fn deterministic_iterates() {
        let a = solve(TWO_NODE, Norm::L2).3;
        let b = solve(TWO_NODE, Norm::L2).3;
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }
}

//! Decision-variable space and the exact bilinear TPIA constraint system.
//!
//! Voltages are written as nominal phasor plus deviation, `V = V^nom∠θ + ΔV`.
//! Per non-slack (node, phase) the system carries
//!
//! ```text
//! Vsq = |c|² + 2 c_r ΔVr + 2 c_i ΔVi + ΔVr² + ΔVi²      (lifting)
//! G·Vsq = P,  B·Vsq = −Q                                 (load admittance)
//! I_load,r = GΔVr − BΔVi + G c_r − B c_i
//! I_load,i = GΔVi + BΔVr + G c_i + B c_r
//! I_load + I_line − I_src = 0                           (KCL, re and im)
//! vmin² ≤ Vsq ≤ vmax²
//! ```
//!
//! with every product held in an auxiliary variable `z_k = x_i·x_j`.
//! Line currents are linear in the deviations. Rated lines get explicit
//! current variables and a convex row `I_r² + I_i² ≤ I_max²`.

mod bounds;
mod residual;

pub use bounds::{initial_bounds, propagate_unfiltered_bounds, Bounds, SOURCE_LIMIT_PU};
pub use residual::{
    assemble_point, evaluate_residual, nominal_voltages, voltages_from_point, Residual, Voltages,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{Line, Network, NodeKind, NodePhase, Phase};
use crate::rows::{compress, LinearRow, QuadRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm '{other}'"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    DvRe,
    DvIm,
    Vsq,
    GLoad,
    BLoad,
    SrcRe,
    SrcIm,
    SrcRePos,
    SrcReNeg,
    SrcImPos,
    SrcImNeg,
    LoadRe,
    LoadIm,
    LineRe,
    LineIm,
    Product,
}

impl Role {
    pub fn is_filtered(self) -> bool {
        matches!(self, Role::DvRe | Role::DvIm)
    }

    pub fn is_unfiltered(self) -> bool {
        matches!(self, Role::Vsq | Role::GLoad | Role::BLoad)
    }

    pub fn is_source(self) -> bool {
        matches!(
            self,
            Role::SrcRe
                | Role::SrcIm
                | Role::SrcRePos
                | Role::SrcReNeg
                | Role::SrcImPos
                | Role::SrcImNeg
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Site {
    Node(NodePhase),
    Line { line: usize, phase: Phase },
    Term(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variable {
    pub role: Role,
    pub site: Site,
}

/// Infeasibility-source variables at one candidate location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceVars {
    Signed {
        re: usize,
        im: usize,
    },
    /// Parallel opposing sources, each nonnegative.
    Split {
        re_pos: usize,
        re_neg: usize,
        im_pos: usize,
        im_neg: usize,
    },
}

impl SourceVars {
    /// Coefficients expressing the signed real current.
    pub fn re_terms(&self) -> Vec<(usize, f64)> {
        match *self {
            SourceVars::Signed { re, .. } => vec![(re, 1.0)],
            SourceVars::Split { re_pos, re_neg, .. } => vec![(re_pos, 1.0), (re_neg, -1.0)],
        }
    }

    pub fn im_terms(&self) -> Vec<(usize, f64)> {
        match *self {
            SourceVars::Signed { im, .. } => vec![(im, 1.0)],
            SourceVars::Split { im_pos, im_neg, .. } => vec![(im_pos, 1.0), (im_neg, -1.0)],
        }
    }

    pub fn current(&self, x: &[f64]) -> Complex64 {
        let eval = |t: Vec<(usize, f64)>| t.iter().map(|&(j, a)| a * x[j]).sum::<f64>();
        Complex64::new(eval(self.re_terms()), eval(self.im_terms()))
    }

    pub fn indices(&self) -> Vec<usize> {
        match *self {
            SourceVars::Signed { re, im } => vec![re, im],
            SourceVars::Split {
                re_pos,
                re_neg,
                im_pos,
                im_neg,
            } => vec![re_pos, re_neg, im_pos, im_neg],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedVars {
    pub vsq: usize,
    pub g: usize,
    pub b: usize,
    pub load_re: usize,
    pub load_im: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodePhaseVars {
    pub site: NodePhase,
    pub nominal: Complex64,
    pub dv_re: usize,
    pub dv_im: usize,
    /// `None` on the slack node, whose voltage is fixed.
    pub lifted: Option<LiftedVars>,
    pub source: Option<SourceVars>,
    /// Position in `Network::candidates`.
    pub candidate: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineCurrentVars {
    pub line: usize,
    pub phase: Phase,
    pub re: usize,
    pub im: usize,
}

#[derive(Debug, Clone)]
pub struct VariableSpace {
    pub norm: Norm,
    pub vars: Vec<Variable>,
    pub node_phases: Vec<NodePhaseVars>,
    pub line_currents: Vec<LineCurrentVars>,
    /// ΔV^r and ΔV^i indices, the variables bound tightening works on.
    pub filtered: Vec<usize>,
    /// V^sq, G^load and B^load indices, bounded analytically from `filtered`.
    pub unfiltered: Vec<usize>,
    lookup: HashMap<NodePhase, usize>,
}

impl VariableSpace {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn role(&self, var: usize) -> Role {
        self.vars[var].role
    }

    pub fn node_phase(&self, np: NodePhase) -> Option<&NodePhaseVars> {
        self.lookup.get(&np).map(|&k| &self.node_phases[k])
    }

    /// Filtered variables whose box determines `var`'s derived bounds.
    pub fn filtered_parents(&self, var: usize) -> Vec<usize> {
        let v = self.vars[var];
        if v.role.is_filtered() {
            return vec![var];
        }
        match (v.role.is_unfiltered(), v.site) {
            (true, Site::Node(np)) => {
                let npv = self.node_phase(np).expect("site registered");
                vec![npv.dv_re, npv.dv_im]
            }
            _ => Vec::new(),
        }
    }

    pub fn describe(&self, net: &Network, var: usize) -> String {
        let v = self.vars[var];
        match v.site {
            Site::Node(np) => format!("{:?}[{}]", v.role, net.label(np)),
            Site::Line { line, phase } => format!("{:?}[line {line}:{phase}]", v.role),
            Site::Term(k) => format!("z[{k}]"),
        }
    }
}

/// `z_aux = x_left · x_right`; squares have `left == right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Bilinear {
    pub aux: usize,
    pub left: usize,
    pub right: usize,
}

impl Bilinear {
    pub fn is_square(&self) -> bool {
        self.left == self.right
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        x[self.aux] - x[self.left] * x[self.right]
    }
}

/// `f(x) = Σ c·x + ½ Σ q·x²` over the source variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub norm: Norm,
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<(usize, f64)>,
}

impl Objective {
    pub fn value(&self, x: &[f64]) -> f64 {
        let l: f64 = self.linear.iter().map(|&(j, c)| c * x[j]).sum();
        let q: f64 = self
            .quadratic
            .iter()
            .map(|&(j, c)| 0.5 * c * x[j] * x[j])
            .sum();
        l + q
    }

    pub fn add_gradient(&self, x: &[f64], grad: &mut [f64]) {
        for &(j, c) in &self.linear {
            grad[j] += c;
        }
        for &(j, c) in &self.quadratic {
            grad[j] += c * x[j];
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub n_vars: usize,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
    pub quadratic: Vec<QuadRow>,
    pub bilinear: Vec<Bilinear>,
    pub objective: Objective,
}

impl ConstraintSystem {
    pub fn max_bilinear_residual(&self, x: &[f64]) -> f64 {
        self.bilinear
            .iter()
            .map(|t| t.residual(x).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation over all rows and bilinear identities (bounds excluded).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let eq = self.equalities.iter().map(|r| r.residual(x).abs());
        let le = self.inequalities.iter().map(|r| r.residual(x).max(0.0));
        let qd = self.quadratic.iter().map(|r| r.residual(x).max(0.0));
        eq.chain(le)
            .chain(qd)
            .fold(self.max_bilinear_residual(x), f64::max)
    }
}

/// Affine expression `Σ a·x + constant`.
#[derive(Debug, Default, Clone)]
struct Affine {
    coeffs: Vec<(usize, f64)>,
    constant: f64,
}

struct Builder<'a> {
    net: &'a Network,
    vars: Vec<Variable>,
    terms: Vec<Bilinear>,
}

impl Builder<'_> {
    fn var(&mut self, role: Role, site: Site) -> usize {
        self.vars.push(Variable { role, site });
        self.vars.len() - 1
    }

    fn product(&mut self, left: usize, right: usize) -> usize {
        let k = self.terms.len();
        let aux = self.var(Role::Product, Site::Term(k));
        self.terms.push(Bilinear { aux, left, right });
        aux
    }
}

/// Real and imaginary current leaving `at` through `line` on `phase`,
/// as affine expressions in the voltage deviations.
fn line_current(
    space: &HashMap<NodePhase, (usize, usize, Complex64)>,
    line: &Line,
    at_from: bool,
    phase: Phase,
) -> (Affine, Affine) {
    let (here, there) = if at_from {
        (line.from, line.to)
    } else {
        (line.to, line.from)
    };
    let row = line.phase_position(phase).expect("phase on line");
    let mut re = Affine::default();
    let mut im = Affine::default();
    for (col, &phi) in line.phases.iter().enumerate() {
        let y = line.y[row][col];
        let (g, b) = (y.re, y.im);
        for (node, sign) in [(here, 1.0), (there, -1.0)] {
            let &(dr, di, c) = &space[&NodePhase { node, phase: phi }];
            // Re: G·Vr − B·Vi ; Im: G·Vi + B·Vr
            re.coeffs.push((dr, sign * g));
            re.coeffs.push((di, -sign * b));
            re.constant += sign * (g * c.re - b * c.im);
            im.coeffs.push((di, sign * g));
            im.coeffs.push((dr, sign * b));
            im.constant += sign * (g * c.im + b * c.re);
        }
    }
    (re, im)
}

/// Builds the variable space and the exact bilinear constraint system.
pub fn build(net: &Network, norm: Norm) -> Result<(VariableSpace, ConstraintSystem)> {
    for n in &net.nodes {
        if n.vmin <= 0.0 {
            return Err(Error::Formulation(format!(
                "node '{}' has a non-positive lower voltage limit",
                n.id
            )));
        }
    }

    let mut b = Builder {
        net,
        vars: Vec::new(),
        terms: Vec::new(),
    };
    let mut node_phases = Vec::new();
    let mut dv_map = HashMap::new();
    let mut filtered = Vec::new();
    let mut unfiltered = Vec::new();

    for np in net.node_phases() {
        let node = &b.net.nodes[np.node];
        let nominal = node.nominal(np.phase);
        let dv_re = b.var(Role::DvRe, Site::Node(np));
        let dv_im = b.var(Role::DvIm, Site::Node(np));
        filtered.extend([dv_re, dv_im]);
        dv_map.insert(np, (dv_re, dv_im, nominal));

        let lifted = (node.kind != NodeKind::Slack).then(|| {
            let lv = LiftedVars {
                vsq: b.var(Role::Vsq, Site::Node(np)),
                g: b.var(Role::GLoad, Site::Node(np)),
                b: b.var(Role::BLoad, Site::Node(np)),
                load_re: b.var(Role::LoadRe, Site::Node(np)),
                load_im: b.var(Role::LoadIm, Site::Node(np)),
            };
            unfiltered.extend([lv.vsq, lv.g, lv.b]);
            lv
        });

        let candidate = net.candidates.iter().position(|&c| c == np);
        let source = candidate.map(|_| match norm {
            Norm::L2 => SourceVars::Signed {
                re: b.var(Role::SrcRe, Site::Node(np)),
                im: b.var(Role::SrcIm, Site::Node(np)),
            },
            Norm::L1 => SourceVars::Split {
                re_pos: b.var(Role::SrcRePos, Site::Node(np)),
                re_neg: b.var(Role::SrcReNeg, Site::Node(np)),
                im_pos: b.var(Role::SrcImPos, Site::Node(np)),
                im_neg: b.var(Role::SrcImNeg, Site::Node(np)),
            },
        });

        node_phases.push(NodePhaseVars {
            site: np,
            nominal,
            dv_re,
            dv_im,
            lifted,
            source,
            candidate,
        });
    }

    let mut line_currents = Vec::new();
    for (li, line) in net.lines.iter().enumerate() {
        if line.rating.is_some() {
            for &phase in &line.phases {
                line_currents.push(LineCurrentVars {
                    line: li,
                    phase,
                    re: b.var(Role::LineRe, Site::Line { line: li, phase }),
                    im: b.var(Role::LineIm, Site::Line { line: li, phase }),
                });
            }
        }
    }

    let mut equalities = Vec::new();
    let mut inequalities = Vec::new();
    let mut quadratic = Vec::new();

    for npv in &node_phases {
        let Some(lv) = npv.lifted else { continue };
        let np = npv.site;
        let node = &net.nodes[np.node];
        let c = npv.nominal;
        let load = node.load(np.phase);

        // Vsq lifting over the decomposed voltage.
        let sq_re = b.product(npv.dv_re, npv.dv_re);
        let sq_im = b.product(npv.dv_im, npv.dv_im);
        equalities.push(LinearRow::new(
            compress(vec![
                (lv.vsq, 1.0),
                (npv.dv_re, -2.0 * c.re),
                (npv.dv_im, -2.0 * c.im),
                (sq_re, -1.0),
                (sq_im, -1.0),
            ]),
            c.norm_sqr(),
        ));
        inequalities.push(LinearRow::new(vec![(lv.vsq, -1.0)], -node.vmin * node.vmin));
        inequalities.push(LinearRow::new(vec![(lv.vsq, 1.0)], node.vmax * node.vmax));

        if load.is_zero() {
            // G = B = 0 is pinned by the bounds; load current is the linear part only.
            equalities.push(LinearRow::new(
                compress(vec![(lv.load_re, 1.0), (lv.g, -c.re), (lv.b, c.im)]),
                0.0,
            ));
            equalities.push(LinearRow::new(
                compress(vec![(lv.load_im, 1.0), (lv.g, -c.im), (lv.b, -c.re)]),
                0.0,
            ));
        } else {
            let gv = b.product(lv.g, lv.vsq);
            let bv = b.product(lv.b, lv.vsq);
            equalities.push(LinearRow::new(vec![(gv, 1.0)], load.p));
            equalities.push(LinearRow::new(vec![(bv, 1.0)], -load.q));

            let g_dr = b.product(lv.g, npv.dv_re);
            let b_di = b.product(lv.b, npv.dv_im);
            let g_di = b.product(lv.g, npv.dv_im);
            let b_dr = b.product(lv.b, npv.dv_re);
            equalities.push(LinearRow::new(
                compress(vec![
                    (lv.load_re, 1.0),
                    (g_dr, -1.0),
                    (b_di, 1.0),
                    (lv.g, -c.re),
                    (lv.b, c.im),
                ]),
                0.0,
            ));
            equalities.push(LinearRow::new(
                compress(vec![
                    (lv.load_im, 1.0),
                    (g_di, -1.0),
                    (b_dr, -1.0),
                    (lv.g, -c.im),
                    (lv.b, -c.re),
                ]),
                0.0,
            ));
        }

        // KCL: I_load + Σ I_line − I_src = 0.
        let mut kcl_re = vec![(lv.load_re, 1.0)];
        let mut kcl_im = vec![(lv.load_im, 1.0)];
        let mut const_re = 0.0;
        let mut const_im = 0.0;
        for line in &net.lines {
            let at_from = line.from == np.node;
            if !(at_from || line.to == np.node) || line.phase_position(np.phase).is_none() {
                continue;
            }
            let (re, im) = line_current(&dv_map, line, at_from, np.phase);
            kcl_re.extend(re.coeffs);
            kcl_im.extend(im.coeffs);
            const_re += re.constant;
            const_im += im.constant;
        }
        if let Some(src) = npv.source {
            kcl_re.extend(src.re_terms().into_iter().map(|(j, a)| (j, -a)));
            kcl_im.extend(src.im_terms().into_iter().map(|(j, a)| (j, -a)));
        }
        equalities.push(LinearRow::new(compress(kcl_re), -const_re));
        equalities.push(LinearRow::new(compress(kcl_im), -const_im));
    }

    for lc in &line_currents {
        let line = &net.lines[lc.line];
        let (re, im) = line_current(&dv_map, line, true, lc.phase);
        let mut row_re = vec![(lc.re, 1.0)];
        row_re.extend(re.coeffs.into_iter().map(|(j, a)| (j, -a)));
        let mut row_im = vec![(lc.im, 1.0)];
        row_im.extend(im.coeffs.into_iter().map(|(j, a)| (j, -a)));
        equalities.push(LinearRow::new(compress(row_re), re.constant));
        equalities.push(LinearRow::new(compress(row_im), im.constant));
        let rating = line.rating.expect("rated line");
        quadratic.push(QuadRow {
            squares: vec![(lc.re, 1.0), (lc.im, 1.0)],
            linear: Vec::new(),
            rhs: rating * rating,
        });
    }

    let mut linear = Vec::new();
    let mut quad = Vec::new();
    for npv in &node_phases {
        let (Some(src), Some(k)) = (npv.source, npv.candidate) else {
            continue;
        };
        let w = net.weights[k];
        match src {
            SourceVars::Signed { re, im } => {
                quad.push((re, w));
                quad.push((im, w));
            }
            SourceVars::Split { .. } => {
                linear.extend(src.indices().into_iter().map(|j| (j, w)));
            }
        }
    }

    let lookup = node_phases
        .iter()
        .enumerate()
        .map(|(k, v)| (v.site, k))
        .collect();
    let n_vars = b.vars.len();
    let space = VariableSpace {
        norm,
        vars: b.vars,
        node_phases,
        line_currents,
        filtered,
        unfiltered,
        lookup,
    };
    let system = ConstraintSystem {
        n_vars,
        equalities,
        inequalities,
        quadratic,
        bilinear: b.terms,
        objective: Objective {
            norm,
            linear,
            quadratic: quad,
        },
    };
    Ok((space, system))
}

#[cfg(test)]
mod tests;

//! Direct evaluation of KCL residuals at given voltages, independent of the
//! lifted system. Also maps voltages into a full point of the variable space.

use num_complex::Complex64;
use serde::Serialize;

use super::{ConstraintSystem, Role, SourceVars, VariableSpace};
use crate::error::{Error, Result};
use crate::feeder::{Network, NodeKind, NodePhase, Phase};

/// Complex voltage per node, indexed by phase; absent phases hold zero.
pub type Voltages = Vec<[Complex64; 3]>;

#[derive(Debug, Clone, Serialize)]
pub struct Residual {
    /// Required injection `I_load + I_line` per candidate, aligned with `Network::candidates`.
    #[serde(skip)]
    pub sources: Vec<Complex64>,
    /// Largest KCL mismatch magnitude at non-slack, non-candidate node-phases.
    pub non_candidate_max: f64,
    pub l1: f64,
    pub l2: f64,
    pub voltage_limits_ok: bool,
    pub current_limits_ok: bool,
}

impl Residual {
    pub fn objective(&self, norm: super::Norm) -> f64 {
        match norm {
            super::Norm::L1 => self.l1,
            super::Norm::L2 => self.l2,
        }
    }
}

fn load_current(net: &Network, np: NodePhase, v: Complex64) -> Result<Complex64> {
    let load = net.nodes[np.node].load(np.phase);
    if load.is_zero() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let vsq = v.norm_sqr();
    if vsq == 0.0 {
        return Err(Error::ZeroVoltage(net.label(np)));
    }
    Ok(Complex64::new(load.p, -load.q) * v / vsq)
}

/// Current leaving `node` on `phase` through all incident lines.
fn line_outflow(net: &Network, v: &Voltages, node: usize, phase: Phase) -> Complex64 {
    let mut total = Complex64::new(0.0, 0.0);
    for line in &net.lines {
        let other = if line.from == node {
            line.to
        } else if line.to == node {
            line.from
        } else {
            continue;
        };
        let Some(row) = line.phase_position(phase) else {
            continue;
        };
        for (col, &phi) in line.phases.iter().enumerate() {
            let k = phi.index();
            total += line.y[row][col] * (v[node][k] - v[other][k]);
        }
    }
    total
}

/// Current on `line`, `phase`, measured at the from-end.
pub(crate) fn line_current_at_from(
    net: &Network,
    v: &Voltages,
    line: usize,
    phase: Phase,
) -> Complex64 {
    let line = &net.lines[line];
    let row = line.phase_position(phase).expect("phase on line");
    line.phases
        .iter()
        .enumerate()
        .map(|(col, &phi)| line.y[row][col] * (v[line.from][phi.index()] - v[line.to][phi.index()]))
        .sum()
}

/// KCL residuals, source currents and objectives at `voltages`.
pub fn evaluate_residual(net: &Network, voltages: &Voltages) -> Result<Residual> {
    if voltages.len() != net.nodes.len() {
        return Err(Error::Config(format!(
            "expected voltages for {} nodes, got {}",
            net.nodes.len(),
            voltages.len()
        )));
    }
    let mut sources = vec![Complex64::new(0.0, 0.0); net.candidates.len()];
    let mut non_candidate_max = 0.0_f64;
    let mut voltage_limits_ok = true;
    for np in net.node_phases() {
        let node = &net.nodes[np.node];
        if node.kind == NodeKind::Slack {
            continue;
        }
        let v = voltages[np.node][np.phase.index()];
        let mag2 = v.norm_sqr();
        if mag2 < node.vmin * node.vmin || mag2 > node.vmax * node.vmax {
            voltage_limits_ok = false;
        }
        let mismatch = load_current(net, np, v)? + line_outflow(net, voltages, np.node, np.phase);
        match net.candidates.iter().position(|&c| c == np) {
            Some(k) => sources[k] = mismatch,
            None => non_candidate_max = non_candidate_max.max(mismatch.norm()),
        }
    }

    let mut current_limits_ok = true;
    for (li, line) in net.lines.iter().enumerate() {
        let Some(rating) = line.rating else { continue };
        for &phase in &line.phases {
            if line_current_at_from(net, voltages, li, phase).norm_sqr() > rating * rating {
                current_limits_ok = false;
            }
        }
    }

    let l1 = sources
        .iter()
        .zip(&net.weights)
        .map(|(s, w)| w * (s.re.abs() + s.im.abs()))
        .sum();
    let l2 = sources
        .iter()
        .zip(&net.weights)
        .map(|(s, w)| 0.5 * w * s.norm_sqr())
        .sum();
    Ok(Residual {
        sources,
        non_candidate_max,
        l1,
        l2,
        voltage_limits_ok,
        current_limits_ok,
    })
}

/// Fills every variable of the lifted system from node voltages. Sources at
/// candidates take the KCL residual; in L1 mode it is split by sign.
pub fn assemble_point(
    space: &VariableSpace,
    system: &ConstraintSystem,
    net: &Network,
    voltages: &Voltages,
) -> Result<Vec<f64>> {
    let residual = evaluate_residual(net, voltages)?;
    let mut x = vec![0.0; space.len()];
    for npv in &space.node_phases {
        let v = voltages[npv.site.node][npv.site.phase.index()];
        let dv = v - npv.nominal;
        x[npv.dv_re] = dv.re;
        x[npv.dv_im] = dv.im;
        if let Some(lv) = npv.lifted {
            let vsq = v.norm_sqr();
            let load = net.nodes[npv.site.node].load(npv.site.phase);
            let (g, b) = if load.is_zero() {
                (0.0, 0.0)
            } else if vsq == 0.0 {
                return Err(Error::ZeroVoltage(net.label(npv.site)));
            } else {
                (load.p / vsq, -load.q / vsq)
            };
            let i_load = Complex64::new(g, b) * v;
            x[lv.vsq] = vsq;
            x[lv.g] = g;
            x[lv.b] = b;
            x[lv.load_re] = i_load.re;
            x[lv.load_im] = i_load.im;
        }
        if let (Some(src), Some(k)) = (npv.source, npv.candidate) {
            let s = residual.sources[k];
            match src {
                SourceVars::Signed { re, im } => {
                    x[re] = s.re;
                    x[im] = s.im;
                }
                SourceVars::Split {
                    re_pos,
                    re_neg,
                    im_pos,
                    im_neg,
                } => {
                    x[re_pos] = s.re.max(0.0);
                    x[re_neg] = (-s.re).max(0.0);
                    x[im_pos] = s.im.max(0.0);
                    x[im_neg] = (-s.im).max(0.0);
                }
            }
        }
    }
    for lc in &space.line_currents {
        let i = line_current_at_from(net, voltages, lc.line, lc.phase);
        x[lc.re] = i.re;
        x[lc.im] = i.im;
    }
    for t in &system.bilinear {
        debug_assert_ne!(space.role(t.left), Role::Product);
        x[t.aux] = x[t.left] * x[t.right];
    }
    Ok(x)
}

/// Node voltages `V^nom∠θ + ΔV` read back from a point.
pub fn voltages_from_point(space: &VariableSpace, net: &Network, x: &[f64]) -> Voltages {
    let mut v = vec![[Complex64::new(0.0, 0.0); 3]; net.nodes.len()];
    for npv in &space.node_phases {
        v[npv.site.node][npv.site.phase.index()] =
            npv.nominal + Complex64::new(x[npv.dv_re], x[npv.dv_im]);
    }
    v
}

/// Flat nominal voltages for every node-phase.
pub fn nominal_voltages(net: &Network) -> Voltages {
    let mut v = vec![[Complex64::new(0.0, 0.0); 3]; net.nodes.len()];
    for np in net.node_phases() {
        v[np.node][np.phase.index()] = net.nodes[np.node].nominal(np.phase);
    }
    v
}

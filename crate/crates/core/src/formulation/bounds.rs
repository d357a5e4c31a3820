use serde::{Deserialize, Serialize};

use super::{SourceVars, VariableSpace};
use crate::error::{Error, Result};
use crate::feeder::Network;
use crate::interval::Interval;

/// Default magnitude limit on each infeasibility-source component, pu.
pub const SOURCE_LIMIT_PU: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn interval(&self, j: usize) -> Interval {
        Interval::new(self.lower[j], self.upper[j])
    }

    pub fn set(&mut self, j: usize, iv: Interval) {
        self.lower[j] = iv.lo;
        self.upper[j] = iv.hi;
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn is_fixed(&self, j: usize) -> bool {
        self.lower[j] == self.upper[j]
    }

    /// Signed distance of `x` to the box boundary; negative means outside.
    pub fn slack(&self, x: &[f64], indices: &[usize]) -> f64 {
        indices
            .iter()
            .map(|&j| (x[j] - self.lower[j]).min(self.upper[j] - x[j]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64], indices: &[usize], tol: f64) -> bool {
        self.slack(x, indices) >= -tol
    }
}

/// Initial box: ΔV ∈ [−dv_box, dv_box] off the slack, slack ΔV pinned at
/// zero, derived bounds on V^sq, G and B, and ±[`SOURCE_LIMIT_PU`] sources.
pub fn initial_bounds(space: &VariableSpace, net: &Network, dv_box: f64) -> Result<Bounds> {
    if !(dv_box > 0.0 && dv_box.is_finite()) {
        return Err(Error::Config(format!(
            "dv_box must be positive, got {dv_box}"
        )));
    }
    let mut bounds = Bounds::unbounded(space.len());
    for npv in &space.node_phases {
        let half = if npv.lifted.is_some() { dv_box } else { 0.0 };
        bounds.set(npv.dv_re, Interval::new(-half, half));
        bounds.set(npv.dv_im, Interval::new(-half, half));
        match npv.source {
            Some(SourceVars::Signed { re, im }) => {
                for j in [re, im] {
                    bounds.set(j, Interval::new(-SOURCE_LIMIT_PU, SOURCE_LIMIT_PU));
                }
            }
            Some(split @ SourceVars::Split { .. }) => {
                for j in split.indices() {
                    bounds.set(j, Interval::new(0.0, SOURCE_LIMIT_PU));
                }
            }
            None => {}
        }
    }
    propagate_unfiltered_bounds(space, net, &bounds)
}

/// Recomputes V^sq, G^load and B^load boxes from the ΔV box.
///
/// V^sq uses sound interval squares (an interval containing zero squares to
/// a zero minimum) intersected with the voltage limits; G and B follow by
/// sign-aware division of `P` and `−Q` by the V^sq interval.
pub fn propagate_unfiltered_bounds(
    space: &VariableSpace,
    net: &Network,
    dv_bounds: &Bounds,
) -> Result<Bounds> {
    let mut out = dv_bounds.clone();
    for npv in &space.node_phases {
        let Some(lv) = npv.lifted else { continue };
        let node = &net.nodes[npv.site.node];
        let load = node.load(npv.site.phase);
        let vr = dv_bounds.interval(npv.dv_re).shift(npv.nominal.re);
        let vi = dv_bounds.interval(npv.dv_im).shift(npv.nominal.im);
        let limits = Interval::new(node.vmin * node.vmin, node.vmax * node.vmax);
        let label = || net.label(npv.site);
        let vsq = (vr.square() + vi.square())
            .intersect(limits)
            .ok_or_else(|| Error::EmptyBox(format!("V^sq at {}", label())))?;
        if vsq.lo <= 0.0 {
            return Err(Error::EmptyBox(format!("V^sq at {} reaches zero", label())));
        }
        out.set(lv.vsq, vsq);
        let g = vsq
            .recip_scaled(load.p)
            .expect("V^sq bounded away from zero");
        let b = vsq
            .recip_scaled(-load.q)
            .expect("V^sq bounded away from zero");
        out.set(lv.g, g);
        out.set(lv.b, b);
    }
    Ok(out)
}

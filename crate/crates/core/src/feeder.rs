//! Three-phase feeder model, JSON ingestion and per-unit normalization.
//!
//! The on-disk document carries loads in kW/kVAr, line ratings in amps and
//! admittances already in per-unit. Everything in [`Network`] is per-unit on
//! `base_power` (per-phase VA) and `base_voltage` (line-to-neutral volts).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default voltage limits applied when a node omits them.
pub const DEFAULT_VMIN_PU: f64 = 0.8;
pub const DEFAULT_VMAX_PU: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Nominal phase angle in radians: 0, -2π/3, +2π/3.
    pub fn angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "a" => Some(Phase::A),
            "b" => Some(Phase::B),
            "c" => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Slack,
    Load,
}

/// Constant-power load on one phase, per-unit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Load {
    pub p: f64,
    pub q: f64,
}

impl Load {
    pub fn is_zero(&self) -> bool {
        self.p == 0.0 && self.q == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub phases: Vec<Phase>,
    pub kind: NodeKind,
    pub vnom: f64,
    /// Indexed by [`Phase::index`]; phases absent from `phases` stay zero.
    pub loads: [Load; 3],
    pub vmin: f64,
    pub vmax: f64,
}

impl Node {
    pub fn has_phase(&self, phase: Phase) -> bool {
        self.phases.contains(&phase)
    }

    pub fn load(&self, phase: Phase) -> Load {
        self.loads[phase.index()]
    }

    /// Nominal phasor `vnom ∠ θ_phase`.
    pub fn nominal(&self, phase: Phase) -> Complex64 {
        Complex64::from_polar(self.vnom, phase.angle())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub phases: Vec<Phase>,
    /// Series admittance block over `phases`, row-major, per-unit.
    pub y: Vec<Vec<Complex64>>,
    /// Thermal rating in per-unit current; `None` leaves the line unconstrained.
    pub rating: Option<f64>,
}

impl Line {
    pub fn phase_position(&self, phase: Phase) -> Option<usize> {
        self.phases.iter().position(|&p| p == phase)
    }
}

/// A (node index, phase) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodePhase {
    pub node: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub base_power: f64,
    pub base_voltage: f64,
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
    pub slack: usize,
    pub candidates: Vec<NodePhase>,
    /// Aligned with `candidates`.
    pub weights: Vec<f64>,
}

impl Network {
    pub fn base_current(&self) -> f64 {
        self.base_power / self.base_voltage
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// All (node, phase) pairs in node order, then phase order.
    pub fn node_phases(&self) -> impl Iterator<Item = NodePhase> + '_ {
        self.nodes.iter().enumerate().flat_map(|(node, n)| {
            let mut phases = n.phases.clone();
            phases.sort();
            phases
                .into_iter()
                .map(move |phase| NodePhase { node, phase })
        })
    }

    pub fn candidate_weight(&self, np: NodePhase) -> Option<f64> {
        self.candidates
            .iter()
            .position(|&c| c == np)
            .map(|k| self.weights[k])
    }

    pub fn label(&self, np: NodePhase) -> String {
        format!("{}:{}", self.nodes[np.node].id, np.phase)
    }

    /// Total number of loaded (node, phase) pairs.
    pub fn loaded_count(&self) -> usize {
        self.node_phases()
            .filter(|np| !self.nodes[np.node].load(np.phase).is_zero())
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

// ---------------------------------------------------------------------------
// Document schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederDoc {
    base_power_va: f64,
    base_voltage_v: f64,
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    lines: Vec<LineDoc>,
    #[serde(default)]
    candidates: CandidatesDoc,
    #[serde(default)]
    weights: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    phases: Vec<Phase>,
    kind: NodeKind,
    #[serde(default = "one")]
    vnom_pu: f64,
    #[serde(default)]
    loads: BTreeMap<String, LoadDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vmin_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vmax_pu: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadDoc {
    p_kw: f64,
    #[serde(default)]
    q_kvar: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    from: String,
    to: String,
    phases: Vec<Phase>,
    y_series_pu: MatrixDoc,
    #[serde(default)]
    rating_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(untagged)]
enum CandidatesDoc {
    #[default]
    #[serde(skip)]
    Missing,
    All(AllTag),
    List(Vec<(String, Phase)>),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AllTag {
    All,
}

/// Parses a feeder JSON document into a validated per-unit [`Network`].
pub fn parse_feeder(text: &str) -> Result<Network> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: FeederDoc = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let network = from_doc(doc)?;
    let errors: Vec<String> = validate(&network)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.message)
        .collect();
    if !errors.is_empty() {
        return Err(Error::InvalidNetwork(errors.join("; ")));
    }
    Ok(network)
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn from_doc(doc: FeederDoc) -> Result<Network> {
    if !(doc.base_power_va.is_finite() && doc.base_power_va > 0.0) {
        return Err(schema("base_power_va", "must be positive and finite"));
    }
    if !(doc.base_voltage_v.is_finite() && doc.base_voltage_v > 0.0) {
        return Err(schema("base_voltage_v", "must be positive and finite"));
    }
    let kva = doc.base_power_va / 1000.0;
    let base_current = doc.base_power_va / doc.base_voltage_v;

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for (k, nd) in doc.nodes.into_iter().enumerate() {
        if index.insert(nd.id.clone(), k).is_some() {
            return Err(Error::InvalidNetwork(format!(
                "duplicate node id '{}'",
                nd.id
            )));
        }
        let mut loads = [Load::default(); 3];
        for (key, ld) in &nd.loads {
            let phase = Phase::parse(key).ok_or_else(|| {
                schema(
                    format!("nodes[{k}].loads"),
                    format!("unknown phase '{key}'"),
                )
            })?;
            if !nd.phases.contains(&phase) {
                return Err(schema(
                    format!("nodes[{k}].loads.{phase}"),
                    format!("node '{}' has no phase {phase}", nd.id),
                ));
            }
            loads[phase.index()] = Load {
                p: ld.p_kw / kva,
                q: ld.q_kvar / kva,
            };
        }
        nodes.push(Node {
            id: nd.id,
            phases: nd.phases,
            kind: nd.kind,
            vnom: nd.vnom_pu,
            loads,
            vmin: nd.vmin_pu.unwrap_or(DEFAULT_VMIN_PU),
            vmax: nd.vmax_pu.unwrap_or(DEFAULT_VMAX_PU),
        });
    }

    let lookup = |id: &str, path: String| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| schema(path, format!("undeclared node '{id}'")))
    };

    let mut lines = Vec::with_capacity(doc.lines.len());
    for (k, ld) in doc.lines.into_iter().enumerate() {
        let from = lookup(&ld.from, format!("lines[{k}].from"))?;
        let to = lookup(&ld.to, format!("lines[{k}].to"))?;
        let n = ld.phases.len();
        let m = &ld.y_series_pu;
        let shape_ok = m.re.len() == n
            && m.im.len() == n
            && m.re.iter().all(|r| r.len() == n)
            && m.im.iter().all(|r| r.len() == n);
        if !shape_ok {
            return Err(schema(
                format!("lines[{k}].y_series_pu"),
                format!("admittance block must be {n}x{n}"),
            ));
        }
        let y = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| Complex64::new(m.re[i][j], m.im[i][j]))
                    .collect()
            })
            .collect();
        lines.push(Line {
            from,
            to,
            phases: ld.phases,
            y,
            rating: ld.rating_a.map(|a| a / base_current),
        });
    }

    let slack = nodes
        .iter()
        .position(|n| n.kind == NodeKind::Slack)
        .ok_or_else(|| Error::InvalidNetwork("missing slack node".into()))?;

    let candidates: Vec<NodePhase> = match doc.candidates {
        CandidatesDoc::Missing | CandidatesDoc::All(_) => nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind != NodeKind::Slack)
            .flat_map(|(node, n)| {
                let mut ph = n.phases.clone();
                ph.sort();
                ph.into_iter().map(move |phase| NodePhase { node, phase })
            })
            .collect(),
        CandidatesDoc::List(list) => {
            let mut out = Vec::with_capacity(list.len());
            for (k, (id, phase)) in list.into_iter().enumerate() {
                let node = lookup(&id, format!("candidates[{k}]"))?;
                out.push(NodePhase { node, phase });
            }
            out
        }
    };

    let weights = match doc.weights {
        None => {
            let w = 1.0 / candidates.len().max(1) as f64;
            vec![w; candidates.len()]
        }
        Some(map) => {
            let mut w = vec![0.0; candidates.len()];
            for (key, value) in map {
                let (id, ph) = key
                    .split_once(':')
                    .ok_or_else(|| schema(format!("weights.{key}"), "key must be 'node:phase'"))?;
                let phase = Phase::parse(ph)
                    .ok_or_else(|| schema(format!("weights.{key}"), "unknown phase"))?;
                let node = lookup(id, format!("weights.{key}"))?;
                let pos = candidates
                    .iter()
                    .position(|c| *c == NodePhase { node, phase })
                    .ok_or_else(|| schema(format!("weights.{key}"), "not a candidate location"))?;
                w[pos] = value;
            }
            w
        }
    };

    Ok(Network {
        base_power: doc.base_power_va,
        base_voltage: doc.base_voltage_v,
        nodes,
        lines,
        slack,
        candidates,
        weights,
    })
}

/// Finds `x` near `guess` with `forward(x) == target` bit for bit.
fn invert_exact(target: f64, guess: f64, forward: impl Fn(f64) -> f64) -> f64 {
    if forward(guess) == target || !guess.is_finite() {
        return guess;
    }
    let mut lo = guess;
    let mut hi = guess;
    for _ in 0..64 {
        lo = lo.next_down();
        hi = hi.next_up();
        if forward(lo) == target {
            return lo;
        }
        if forward(hi) == target {
            return hi;
        }
    }
    guess
}

/// Serializes a network back to the feeder JSON format, choosing physical
/// values that parse back to the identical per-unit model.
pub fn serialize_feeder(net: &Network) -> String {
    let kva = net.base_power / 1000.0;
    let base_current = net.base_power / net.base_voltage;
    let to_kw = |pu: f64| invert_exact(pu, pu * kva, |x| x / kva);
    let nodes = net
        .nodes
        .iter()
        .map(|n| {
            let loads = n
                .phases
                .iter()
                .filter(|p| !n.load(**p).is_zero())
                .map(|&p| {
                    let l = n.load(p);
                    (
                        p.as_str().to_string(),
                        LoadDoc {
                            p_kw: to_kw(l.p),
                            q_kvar: to_kw(l.q),
                        },
                    )
                })
                .collect();
            NodeDoc {
                id: n.id.clone(),
                phases: n.phases.clone(),
                kind: n.kind,
                vnom_pu: n.vnom,
                loads,
                vmin_pu: Some(n.vmin),
                vmax_pu: Some(n.vmax),
            }
        })
        .collect();
    let lines = net
        .lines
        .iter()
        .map(|l| LineDoc {
            from: net.nodes[l.from].id.clone(),
            to: net.nodes[l.to].id.clone(),
            phases: l.phases.clone(),
            y_series_pu: MatrixDoc {
                re: l
                    .y
                    .iter()
                    .map(|r| r.iter().map(|c| c.re).collect())
                    .collect(),
                im: l
                    .y
                    .iter()
                    .map(|r| r.iter().map(|c| c.im).collect())
                    .collect(),
            },
            rating_a: l
                .rating
                .map(|pu| invert_exact(pu, pu * base_current, |a| a / base_current)),
        })
        .collect();
    let candidates = CandidatesDoc::List(
        net.candidates
            .iter()
            .map(|c| (net.nodes[c.node].id.clone(), c.phase))
            .collect(),
    );
    let weights = net
        .candidates
        .iter()
        .zip(&net.weights)
        .map(|(c, &w)| (net.label(*c), w))
        .collect();
    let doc = FeederDoc {
        base_power_va: net.base_power,
        base_voltage_v: net.base_voltage,
        nodes,
        lines,
        candidates,
        weights: Some(weights),
    };
    serde_json::to_string_pretty(&doc).expect("feeder document serializes")
}

/// Checks every network invariant and reports one diagnostic per violation.
pub fn validate(net: &Network) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let finite = |x: f64| x.is_finite();

    if !(finite(net.base_power) && net.base_power > 0.0) {
        out.push(Diagnostic::error("base power must be positive"));
    }
    if !(finite(net.base_voltage) && net.base_voltage > 0.0) {
        out.push(Diagnostic::error("base voltage must be positive"));
    }

    let slack_count = net
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Slack)
        .count();
    if slack_count != 1 {
        out.push(Diagnostic::error(format!(
            "expected exactly one slack node, found {slack_count}"
        )));
    }

    let mut seen = HashMap::new();
    for (k, n) in net.nodes.iter().enumerate() {
        if let Some(prev) = seen.insert(n.id.as_str(), k) {
            out.push(Diagnostic::error(format!(
                "duplicate node id '{}' (positions {prev} and {k})",
                n.id
            )));
        }
        if n.phases.is_empty() {
            out.push(Diagnostic::error(format!("node '{}' has no phases", n.id)));
        }
        let mut ph = n.phases.clone();
        ph.sort();
        ph.dedup();
        if ph.len() != n.phases.len() {
            out.push(Diagnostic::error(format!(
                "node '{}' repeats a phase",
                n.id
            )));
        }
        if !(finite(n.vnom) && n.vnom > 0.0) {
            out.push(Diagnostic::error(format!(
                "node '{}': nominal voltage must be positive",
                n.id
            )));
        }
        if !(finite(n.vmin) && finite(n.vmax)) {
            out.push(Diagnostic::error(format!(
                "node '{}': non-finite voltage limits",
                n.id
            )));
        } else if n.vmin >= n.vmax {
            out.push(Diagnostic::error(format!(
                "node '{}': voltage limits inverted ({} >= {})",
                n.id, n.vmin, n.vmax
            )));
        } else if n.vmin <= 0.0 {
            out.push(Diagnostic::error(format!(
                "node '{}': lower voltage limit must be positive",
                n.id
            )));
        } else if n.kind == NodeKind::Slack && (n.vnom < n.vmin || n.vnom > n.vmax) {
            out.push(Diagnostic::warning(format!(
                "slack node '{}' nominal voltage outside its limits",
                n.id
            )));
        }
        for p in Phase::ALL {
            let l = n.load(p);
            if !(finite(l.p) && finite(l.q)) {
                out.push(Diagnostic::error(format!(
                    "node '{}': non-finite load",
                    n.id
                )));
            }
            if !n.has_phase(p) && !l.is_zero() {
                out.push(Diagnostic::error(format!(
                    "node '{}': load on missing phase {p}",
                    n.id
                )));
            }
        }
    }

    for (k, l) in net.lines.iter().enumerate() {
        if l.from >= net.nodes.len() || l.to >= net.nodes.len() {
            out.push(Diagnostic::error(format!(
                "line {k}: endpoint out of range"
            )));
            continue;
        }
        let (a, b) = (&net.nodes[l.from], &net.nodes[l.to]);
        if l.from == l.to {
            out.push(Diagnostic::error(format!(
                "line {k}: both ends at '{}'",
                a.id
            )));
        }
        for &p in &l.phases {
            for end in [a, b] {
                if !end.has_phase(p) {
                    out.push(Diagnostic::error(format!(
                        "line {k} ({} -> {}): node '{}' has no phase {p}",
                        a.id, b.id, end.id
                    )));
                }
            }
        }
        let n = l.phases.len();
        if l.y.len() != n || l.y.iter().any(|r| r.len() != n) {
            out.push(Diagnostic::error(format!(
                "line {k}: admittance block shape mismatch"
            )));
            continue;
        }
        let mut symmetric = true;
        for i in 0..n {
            for j in 0..n {
                let v = l.y[i][j];
                if !(finite(v.re) && finite(v.im)) {
                    out.push(Diagnostic::error(format!(
                        "line {k}: non-finite admittance"
                    )));
                }
                let d = (v - l.y[j][i]).norm();
                if d > 1e-12 * (1.0 + v.norm()) {
                    symmetric = false;
                }
            }
        }
        if !symmetric {
            out.push(Diagnostic::error(format!(
                "line {k} ({} -> {}): admittance block is not symmetric",
                a.id, b.id
            )));
        }
        if let Some(r) = l.rating {
            if !(finite(r) && r > 0.0) {
                out.push(Diagnostic::error(format!(
                    "line {k}: rating must be positive"
                )));
            }
        }
    }

    if !net.nodes.is_empty() && !is_connected(net) {
        out.push(Diagnostic::error("network graph is disconnected"));
    }

    if net.weights.len() != net.candidates.len() {
        out.push(Diagnostic::error("weights not aligned with candidates"));
    }
    for c in &net.candidates {
        match net.nodes.get(c.node) {
            None => out.push(Diagnostic::error("candidate refers to unknown node")),
            Some(n) => {
                if !n.has_phase(c.phase) {
                    out.push(Diagnostic::error(format!(
                        "candidate '{}:{}' is not a phase of the node",
                        n.id, c.phase
                    )));
                }
                if n.kind == NodeKind::Slack {
                    out.push(Diagnostic::error(format!(
                        "candidate '{}:{}' sits on the slack node",
                        n.id, c.phase
                    )));
                }
            }
        }
    }
    let mut sorted = net.candidates.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != net.candidates.len() {
        out.push(Diagnostic::error("duplicate candidate location"));
    }
    if !net.candidates.is_empty() {
        if net.weights.iter().any(|w| !(finite(*w) && *w >= 0.0)) {
            out.push(Diagnostic::error("weights must be finite and nonnegative"));
        }
        let sum: f64 = net.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(Diagnostic::error(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
    } else {
        out.push(Diagnostic::warning("no infeasibility-source candidates"));
    }
    out
}

fn is_connected(net: &Network) -> bool {
    let n = net.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for l in &net.lines {
        if l.from < n && l.to < n {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TWO_NODE: &str = r#"{
        "base_power_va": 1e6,
        "base_voltage_v": 7200,
        "nodes": [
            {"id": "src", "phases": ["a"], "kind": "slack"},
            {"id": "n1", "phases": ["a"], "kind": "load",
             "loads": {"a": {"p_kw": 500, "q_kvar": 100}}}
        ],
        "lines": [
            {"from": "src", "to": "n1", "phases": ["a"],
             "y_series_pu": {"re": [[2.0]], "im": [[-4.0]]}, "rating_a": null}
        ]
    }"#;

    #[test]
    fn per_unit_load() {
        let net = parse_feeder(TWO_NODE).unwrap();
        assert_eq!(net.nodes[1].load(Phase::A).p, 0.5);
        assert_eq!(net.nodes[1].load(Phase::A).q, 0.1);
        assert_eq!(net.slack, 0);
        assert_eq!(net.nodes[1].vmin, DEFAULT_VMIN_PU);
        assert!(net.lines[0].rating.is_none());
    }

    #[test]
    fn default_weights_are_uniform() {
        let text = TWO_NODE.replace(
            r#"{"id": "n1", "phases": ["a"]"#,
            r#"{"id": "n1", "phases": ["a", "b", "c"]"#,
        );
        let net = parse_feeder(&text).unwrap();
        assert_eq!(net.candidates.len(), 3);
        for w in &net.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((net.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn undeclared_node_names_the_id() {
        let text = TWO_NODE.replace(r#""to": "n1""#, r#""to": "ghost""#);
        let err = parse_feeder(&text).unwrap_err();
        match err {
            Error::Schema { path, message } => {
                assert_eq!(path, "lines[0].to");
                assert!(message.contains("ghost"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_a_path() {
        let text = TWO_NODE.replace(r#""p_kw": 500"#, r#""p_kw": "lots""#);
        match parse_feeder(&text).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "nodes[1].loads.a.p_kw"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_slack_duplicates_and_bad_weights() {
        let no_slack = TWO_NODE.replace(r#""kind": "slack""#, r#""kind": "load""#);
        assert!(
            matches!(parse_feeder(&no_slack), Err(Error::InvalidNetwork(m)) if m.contains("slack"))
        );

        let dup = TWO_NODE.replace(r#""id": "n1""#, r#""id": "src""#);
        assert!(
            matches!(parse_feeder(&dup), Err(Error::InvalidNetwork(m)) if m.contains("duplicate"))
        );

        let weighted = TWO_NODE.replace(r#""lines": ["#, r#""weights": {"n1:a": 0.7}, "lines": ["#);
        assert!(
            matches!(parse_feeder(&weighted), Err(Error::InvalidNetwork(m)) if m.contains("sum"))
        );
    }

    #[test]
    fn rejects_disconnected_graph() {
        let text = TWO_NODE.replace(
            r#"{"id": "n1","#,
            r#"{"id": "island", "phases": ["a"], "kind": "load"}, {"id": "n1","#,
        );
        let err = parse_feeder(&text).unwrap_err();
        assert!(err.to_string().contains("disconnected"), "{err}");
    }

    #[test]
    fn validate_clean_and_faulty() {
        let mut net = parse_feeder(TWO_NODE).unwrap();
        assert!(validate(&net).is_empty());

        net.nodes[1].vmin = 1.1;
        net.nodes[1].vmax = 0.9;
        let d = validate(&net);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Error);
        assert!(d[0].message.contains("voltage limits inverted"));

        let mut net = parse_feeder(TWO_NODE).unwrap();
        net.lines[0].phases = vec![Phase::A, Phase::B];
        net.nodes[0].phases.push(Phase::B);
        net.nodes[1].phases.push(Phase::B);
        net.lines[0].y = vec![
            vec![Complex64::new(2.0, -4.0), Complex64::new(0.1, 0.0)],
            vec![Complex64::new(0.3, 0.0), Complex64::new(2.0, -4.0)],
        ];
        net.candidates.push(NodePhase {
            node: 1,
            phase: Phase::B,
        });
        net.weights = vec![0.5, 0.5];
        let d = validate(&net);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("not symmetric"));
    }

    #[test]
    fn round_trip_is_exact() {
        let net = parse_feeder(TWO_NODE).unwrap();
        let again = parse_feeder(&serialize_feeder(&net)).unwrap();
        assert_eq!(net, again);
    }
}

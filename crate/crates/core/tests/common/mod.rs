//! Test-side oracles, written against the raw network data only.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use tpia::feeder::{Network, NodeKind, NodePhase, Phase};
use tpia::{parse_feeder, Norm};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join("feeders")
}

/// `(file name, network)` for every bundled feeder, sorted by name.
pub fn corpus() -> Vec<(String, Network)> {
    let mut out: Vec<(String, Network)> = std::fs::read_dir(corpus_dir())
        .expect("corpus dir")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "json").then_some(p)
        })
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                parse_feeder(&text).unwrap(),
            )
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn feasible_corpus() -> Vec<(String, Network)> {
    corpus()
        .into_iter()
        .filter(|(n, _)| n.starts_with("feasible"))
        .collect()
}

pub fn infeasible_corpus() -> Vec<(String, Network)> {
    corpus()
        .into_iter()
        .filter(|(n, _)| n.starts_with("infeasible"))
        .collect()
}

pub fn load(name: &str) -> Network {
    parse_feeder(&std::fs::read_to_string(corpus_dir().join(name)).unwrap()).unwrap()
}

pub type Volts = Vec<[Complex64; 3]>;

fn nominal(net: &Network, node: usize, phase: Phase) -> Complex64 {
    let th = match phase {
        Phase::A => 0.0,
        Phase::B => -2.0 * std::f64::consts::PI / 3.0,
        Phase::C => 2.0 * std::f64::consts::PI / 3.0,
    };
    Complex64::from_polar(net.nodes[node].vnom, th)
}

/// `conj(S / V)` with `S = P + jQ`.
fn load_current(net: &Network, np: NodePhase, v: Complex64) -> Complex64 {
    let l = net.nodes[np.node].loads[np.phase.index()];
    (Complex64::new(l.p, l.q) / v).conj()
}

/// Net current leaving `node` on `phase` into the network plus its load.
fn kcl(net: &Network, v: &Volts, np: NodePhase) -> Complex64 {
    let mut i = Complex64::new(0.0, 0.0);
    let l = net.nodes[np.node].loads[np.phase.index()];
    if l.p != 0.0 || l.q != 0.0 {
        i += load_current(net, np, v[np.node][np.phase.index()]);
    }
    for line in &net.lines {
        let other = if line.from == np.node {
            line.to
        } else if line.to == np.node {
            line.from
        } else {
            continue;
        };
        let Some(r) = line.phases.iter().position(|&p| p == np.phase) else {
            continue;
        };
        for (c, &ph) in line.phases.iter().enumerate() {
            let k = ph.index();
            i += line.y[r][c] * (v[np.node][k] - v[other][k]);
        }
    }
    i
}

fn unknowns(net: &Network) -> Vec<NodePhase> {
    let mut out = Vec::new();
    for (node, n) in net.nodes.iter().enumerate() {
        if n.kind == NodeKind::Slack {
            continue;
        }
        for ph in Phase::ALL {
            if n.phases.contains(&ph) {
                out.push(NodePhase { node, phase: ph });
            }
        }
    }
    out
}

fn flat(net: &Network) -> Volts {
    let mut v = vec![[Complex64::new(0.0, 0.0); 3]; net.nodes.len()];
    for (node, n) in net.nodes.iter().enumerate() {
        for &ph in &n.phases {
            v[node][ph.index()] = nominal(net, node, ph);
        }
    }
    v
}

/// Newton–Raphson power flow from a flat start, with a central-difference Jacobian.
pub fn newton_power_flow(net: &Network) -> Volts {
    let idx = unknowns(net);
    let n = idx.len();
    let mut v = flat(net);
    let residual = |v: &Volts| -> DVector<f64> {
        let mut f = DVector::zeros(2 * n);
        for (k, &np) in idx.iter().enumerate() {
            let i = kcl(net, v, np);
            f[2 * k] = i.re;
            f[2 * k + 1] = i.im;
        }
        f
    };
    for _ in 0..50 {
        let f = residual(&v);
        if f.amax() < 1e-13 {
            return v;
        }
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        let h = 1e-7;
        for (k, &np) in idx.iter().enumerate() {
            for part in 0..2 {
                let delta = if part == 0 {
                    Complex64::new(h, 0.0)
                } else {
                    Complex64::new(0.0, h)
                };
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[np.node][np.phase.index()] += delta;
                vm[np.node][np.phase.index()] -= delta;
                let col = (residual(&vp) - residual(&vm)) / (2.0 * h);
                jac.set_column(2 * k + part, &col);
            }
        }
        let step = jac.lu().solve(&(-f)).expect("nonsingular Jacobian");
        for (k, &np) in idx.iter().enumerate() {
            v[np.node][np.phase.index()] += Complex64::new(step[2 * k], step[2 * k + 1]);
        }
    }
    panic!("power flow did not converge");
}

/// Minimum source objective over a phase-decoupled network by grid search.
///
/// Each phase must carry exactly one candidate; every other non-slack
/// node-phase must be unloaded, and is eliminated by its linear KCL. The
/// search covers the candidate's ΔV box and enforces the ΔV box and the
/// voltage limits at every node.
pub fn grid_oracle(net: &Network, norm: Norm, dv_box: f64) -> f64 {
    for line in &net.lines {
        assert!(line.rating.is_none(), "oracle does not model ratings");
        for (r, row) in line.y.iter().enumerate() {
            for (c, y) in row.iter().enumerate() {
                assert!(r == c || y.norm() == 0.0, "oracle needs decoupled phases");
            }
        }
    }
    Phase::ALL
        .iter()
        .filter_map(|&ph| phase_oracle(net, norm, dv_box, ph))
        .sum()
}

fn phase_oracle(net: &Network, norm: Norm, dv_box: f64, ph: Phase) -> Option<f64> {
    let nodes: Vec<usize> = unknowns(net)
        .iter()
        .filter(|np| np.phase == ph)
        .map(|np| np.node)
        .collect();
    if nodes.is_empty() {
        return None;
    }
    let cands: Vec<(usize, f64)> = net
        .candidates
        .iter()
        .zip(&net.weights)
        .filter(|(c, _)| c.phase == ph)
        .map(|(c, &w)| (c.node, w))
        .collect();
    assert_eq!(cands.len(), 1, "one candidate per phase");
    let (cand, weight) = cands[0];
    let others: Vec<usize> = nodes.iter().copied().filter(|&n| n != cand).collect();
    for &o in &others {
        let l = net.nodes[o].loads[ph.index()];
        assert!(
            l.p == 0.0 && l.q == 0.0,
            "non-candidate nodes must be unloaded"
        );
    }
    let k = ph.index();
    // Diagonal admittance of this phase between two nodes.
    let y_between = |a: usize, b: usize| -> Complex64 {
        net.lines
            .iter()
            .filter(|l| (l.from == a && l.to == b) || (l.from == b && l.to == a))
            .filter_map(|l| l.phases.iter().position(|&p| p == ph).map(|r| l.y[r][r]))
            .sum()
    };
    let base = flat(net);
    let eval = |dv: Complex64| -> Option<f64> {
        let mut v = base.clone();
        v[cand][k] = nominal(net, cand, ph) + dv;
        if !others.is_empty() {
            // Σ_b y_ab (V_a − V_b) = 0 for every eliminated node a.
            let m = others.len();
            let mut a = DMatrix::<Complex64>::zeros(m, m);
            let mut rhs = DVector::<Complex64>::zeros(m);
            for (i, &oa) in others.iter().enumerate() {
                for b in 0..net.nodes.len() {
                    if b == oa {
                        continue;
                    }
                    let y = y_between(oa, b);
                    if y.norm() == 0.0 {
                        continue;
                    }
                    a[(i, i)] += y;
                    match others.iter().position(|&o| o == b) {
                        Some(j) => a[(i, j)] -= y,
                        None => rhs[i] += y * v[b][k],
                    }
                }
            }
            let sol = a.lu().solve(&rhs)?;
            for (i, &o) in others.iter().enumerate() {
                v[o][k] = sol[i];
            }
        }
        for &n in &nodes {
            let node = &net.nodes[n];
            let d = v[n][k] - nominal(net, n, ph);
            if d.re.abs() > dv_box || d.im.abs() > dv_box {
                return None;
            }
            let m2 = v[n][k].norm_sqr();
            if m2 < node.vmin * node.vmin || m2 > node.vmax * node.vmax {
                return None;
            }
        }
        let s = kcl(
            net,
            &v,
            NodePhase {
                node: cand,
                phase: ph,
            },
        );
        Some(match norm {
            Norm::L1 => weight * (s.re.abs() + s.im.abs()),
            Norm::L2 => 0.5 * weight * s.norm_sqr(),
        })
    };
    let mut best = (f64::INFINITY, Complex64::new(0.0, 0.0));
    let scan = |center: Complex64, half: f64, pts: usize, best: &mut (f64, Complex64)| {
        let step = 2.0 * half / (pts - 1) as f64;
        for i in 0..pts {
            for j in 0..pts {
                let dv = center + Complex64::new(-half + i as f64 * step, -half + j as f64 * step);
                if dv.re.abs() > dv_box || dv.im.abs() > dv_box {
                    continue;
                }
                if let Some(f) = eval(dv) {
                    if f < best.0 {
                        *best = (f, dv);
                    }
                }
            }
        }
        step
    };
    let mut step = scan(Complex64::new(0.0, 0.0), dv_box, 401, &mut best);
    assert!(best.0.is_finite(), "no feasible grid point");
    // Zoom in until the grid spacing is well below 1e-4.
    while step > 1e-8 {
        let center = best.1;
        step = scan(center, 4.0 * step, 33, &mut best);
    }
    Some(best.0)
}

/// Largest phasor difference over all node-phases.
pub fn max_voltage_error(a: &Volts, b: &Volts) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).norm()))
        .fold(0.0, f64::max)
}

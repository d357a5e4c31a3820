use approx::assert_abs_diff_eq;
use num_complex::Complex64;
use proptest::prelude::*;

use super::*;
use crate::feeder::parse_feeder;
use crate::interval::Interval;

const TWO_NODE: &str = r#"{
    "base_power_va": 1e6,
    "base_voltage_v": 7200,
    "nodes": [
        {"id": "src", "phases": ["a"], "kind": "slack"},
        {"id": "n1", "phases": ["a"], "kind": "load",
         "loads": {"a": {"p_kw": 500, "q_kvar": 100}}}
    ],
    "lines": [
        {"from": "src", "to": "n1", "phases": ["a"],
         "y_series_pu": {"re": [[2.0]], "im": [[-4.0]]}}
    ]
}"#;

/// Coupled three-phase chain with an unloaded middle node and a rated line.
const THREE_PHASE: &str = r#"{
    "base_power_va": 1e6,
    "base_voltage_v": 2400,
    "nodes": [
        {"id": "s", "phases": ["a", "b", "c"], "kind": "slack"},
        {"id": "m", "phases": ["a", "b", "c"], "kind": "load"},
        {"id": "f", "phases": ["a", "b", "c"], "kind": "load",
         "loads": {"a": {"p_kw": 300, "q_kvar": 120},
                   "b": {"p_kw": 200, "q_kvar": 80},
                   "c": {"p_kw": -50, "q_kvar": 40}}}
    ],
    "lines": [
        {"from": "s", "to": "m", "phases": ["a", "b", "c"],
         "y_series_pu": {"re": [[6.0, -1.0, -1.0], [-1.0, 6.0, -1.0], [-1.0, -1.0, 6.0]],
                         "im": [[-12.0, 2.0, 2.0], [2.0, -12.0, 2.0], [2.0, 2.0, -12.0]]},
         "rating_a": 2000},
        {"from": "m", "to": "f", "phases": ["a", "b", "c"],
         "y_series_pu": {"re": [[5.0, -0.5, -0.5], [-0.5, 5.0, -0.5], [-0.5, -0.5, 5.0]],
                         "im": [[-10.0, 1.5, 1.5], [1.5, -10.0, 1.5], [1.5, 1.5, -10.0]]}}
    ]
}"#;

fn count_roles(space: &VariableSpace, role: Role) -> usize {
    space.vars.iter().filter(|v| v.role == role).count()
}

#[test]
fn two_node_term_counts() {
    let net = parse_feeder(TWO_NODE).unwrap();
    let (space, system) = build(&net, Norm::L2).unwrap();
    let squares = system.bilinear.iter().filter(|t| t.is_square()).count();
    assert_eq!(squares, 2, "one ΔV^r², one ΔV^i²");
    let load_pairs = system
        .bilinear
        .iter()
        .filter(|t| space.role(t.right) == Role::Vsq)
        .count();
    assert_eq!(load_pairs, 2);
    let current_terms = system
        .bilinear
        .iter()
        .filter(|t| !t.is_square() && space.role(t.right) != Role::Vsq)
        .count();
    assert_eq!(current_terms, 4);
    let kcl = system
        .equalities
        .iter()
        .filter(|r| {
            r.coeffs
                .iter()
                .any(|&(j, _)| matches!(space.role(j), Role::SrcRe | Role::SrcIm))
        })
        .count();
    assert_eq!(kcl, 2);
    assert_eq!(count_roles(&space, Role::Vsq), 1);
}

#[test]
fn every_product_is_used() {
    let net = parse_feeder(THREE_PHASE).unwrap();
    for norm in [Norm::L1, Norm::L2] {
        let (_, system) = build(&net, norm).unwrap();
        for t in &system.bilinear {
            let used = system
                .equalities
                .iter()
                .chain(&system.inequalities)
                .any(|r| r.coeffs.iter().any(|&(j, _)| j == t.aux));
            assert!(used, "dangling product {}", t.aux);
        }
    }
}

#[test]
fn zero_load_pins_admittance() {
    let net = parse_feeder(THREE_PHASE).unwrap();
    let (space, system) = build(&net, Norm::L2).unwrap();
    let bounds = initial_bounds(&space, &net, 0.25).unwrap();
    let m = net.node_index("m").unwrap();
    for phase in Phase::ALL {
        let npv = space.node_phase(NodePhase { node: m, phase }).unwrap();
        let lv = npv.lifted.unwrap();
        assert_eq!((bounds.lower[lv.g], bounds.upper[lv.g]), (0.0, 0.0));
        assert_eq!((bounds.lower[lv.b], bounds.upper[lv.b]), (0.0, 0.0));
        assert!(!system
            .bilinear
            .iter()
            .any(|t| [lv.g, lv.b].contains(&t.left)));
    }
}

#[test]
fn l1_objective_has_four_unit_split_terms() {
    let text = TWO_NODE.replace("\"lines\"", "\"candidates\": [[\"n1\", \"a\"]],\n\"lines\"");
    let net = parse_feeder(&text).unwrap();
    let (space, system) = build(&net, Norm::L1).unwrap();
    assert!(system.objective.quadratic.is_empty());
    assert_eq!(system.objective.linear.len(), 4);
    for &(j, w) in &system.objective.linear {
        assert_eq!(w, 1.0);
        assert!(space.role(j).is_source());
    }
    let bounds = initial_bounds(&space, &net, 0.25).unwrap();
    for &(j, _) in &system.objective.linear {
        assert_eq!(bounds.lower[j], 0.0);
    }
}

#[test]
fn rejects_zero_lower_voltage() {
    let mut net = parse_feeder(TWO_NODE).unwrap();
    net.nodes[1].vmin = 0.0;
    assert!(matches!(build(&net, Norm::L2), Err(Error::Formulation(_))));
}

#[test]
fn initial_box_values() {
    let net = parse_feeder(TWO_NODE).unwrap();
    let (space, _) = build(&net, Norm::L2).unwrap();
    let b = initial_bounds(&space, &net, 0.25).unwrap();
    let slack = &space.node_phases[0];
    assert!(slack.lifted.is_none());
    assert_eq!((b.lower[slack.dv_re], b.upper[slack.dv_re]), (0.0, 0.0));
    assert_eq!((b.lower[slack.dv_im], b.upper[slack.dv_im]), (0.0, 0.0));
    let load = &space.node_phases[1];
    assert_eq!((b.lower[load.dv_re], b.upper[load.dv_re]), (-0.25, 0.25));
    // [0.75, 1.25]² + [−0.25, 0.25]² = [0.5625, 1.625], cut to [0.64, 1.44].
    let vsq = load.lifted.unwrap().vsq;
    assert_eq!(b.lower[vsq], 0.64_f64.max(0.8 * 0.8));
    assert_abs_diff_eq!(b.upper[vsq], 1.44, epsilon = 1e-15);
    assert!(initial_bounds(&space, &net, 0.0).is_err());
}

#[test]
fn propagation_examples() {
    // V^r ∈ [0.9, 1.1], V^i ∈ [−0.1, 0.1] with wide voltage limits.
    let mut net = parse_feeder(TWO_NODE).unwrap();
    net.nodes[1].vmin = 0.5;
    net.nodes[1].vmax = 1.5;
    net.nodes[1].loads[0] = crate::feeder::Load { p: 1.0, q: 0.5 };
    let (space, _) = build(&net, Norm::L2).unwrap();
    let load = &space.node_phases[1];
    let lv = load.lifted.unwrap();
    let mut b = initial_bounds(&space, &net, 0.25).unwrap();
    b.set(load.dv_re, Interval::new(-0.1, 0.1));
    b.set(load.dv_im, Interval::new(-0.1, 0.1));
    let b = propagate_unfiltered_bounds(&space, &net, &b).unwrap();
    assert_abs_diff_eq!(b.lower[lv.vsq], 0.81, epsilon = 1e-12);
    assert_abs_diff_eq!(b.upper[lv.vsq], 1.22, epsilon = 1e-12);

    // Cap V^sq at 1.21 via vmax = 1.1 to reproduce the G/B examples.
    net.nodes[1].vmax = 1.1;
    let b = propagate_unfiltered_bounds(&space, &net, &b).unwrap();
    assert_abs_diff_eq!(b.lower[lv.g], 0.8264, epsilon = 1e-4);
    assert_abs_diff_eq!(b.upper[lv.g], 1.2346, epsilon = 1e-4);
    assert_abs_diff_eq!(b.lower[lv.b], -0.6173, epsilon = 1e-4);
    assert_abs_diff_eq!(b.upper[lv.b], -0.4132, epsilon = 1e-4);
}

#[test]
fn empty_voltage_window_is_an_error() {
    let mut net = parse_feeder(TWO_NODE).unwrap();
    net.nodes[1].vmin = 1.3;
    net.nodes[1].vmax = 1.4;
    let (space, _) = build(&net, Norm::L2).unwrap();
    assert!(matches!(
        initial_bounds(&space, &net, 0.1),
        Err(Error::EmptyBox(_))
    ));
}

#[test]
fn zero_load_flat_start_has_zero_residual() {
    let text = TWO_NODE.replace(r#""p_kw": 500, "q_kvar": 100"#, r#""p_kw": 0"#);
    let net = parse_feeder(&text).unwrap();
    let r = evaluate_residual(&net, &nominal_voltages(&net)).unwrap();
    assert_eq!(r.sources, vec![Complex64::new(0.0, 0.0)]);
    assert_eq!((r.l1, r.l2), (0.0, 0.0));
    assert!(r.voltage_limits_ok && r.current_limits_ok);
}

#[test]
fn zero_voltage_at_load_is_an_error() {
    let net = parse_feeder(TWO_NODE).unwrap();
    let mut v = nominal_voltages(&net);
    v[1][0] = Complex64::new(0.0, 0.0);
    assert!(matches!(
        evaluate_residual(&net, &v),
        Err(Error::ZeroVoltage(_))
    ));
}

#[test]
fn l1_split_recombines_to_signed_current() {
    let net = parse_feeder(THREE_PHASE).unwrap();
    let (space, system) = build(&net, Norm::L1).unwrap();
    let mut v = nominal_voltages(&net);
    v[2][0] += Complex64::new(-0.03, 0.02);
    let x = assemble_point(&space, &system, &net, &v).unwrap();
    let r = evaluate_residual(&net, &v).unwrap();
    for npv in &space.node_phases {
        if let (Some(src), Some(k)) = (npv.source, npv.candidate) {
            let i = src.current(&x);
            assert_abs_diff_eq!(i.re, r.sources[k].re, epsilon = 1e-15);
            assert_abs_diff_eq!(i.im, r.sources[k].im, epsilon = 1e-15);
            let idx = src.indices();
            assert_eq!(x[idx[0]].min(x[idx[1]]), 0.0);
            assert_eq!(x[idx[2]].min(x[idx[3]]), 0.0);
        }
    }
    assert_abs_diff_eq!(system.objective.value(&x), r.l1, epsilon = 1e-14);
}

fn perturbed(net: &Network, deltas: &[(f64, f64)]) -> Voltages {
    let mut v = nominal_voltages(net);
    let mut k = 0;
    for np in net.node_phases() {
        if net.nodes[np.node].kind == NodeKind::Slack {
            continue;
        }
        let (dr, di) = deltas[k % deltas.len()];
        v[np.node][np.phase.index()] += Complex64::new(dr, di);
        k += 1;
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Points built from voltages satisfy every lifted row, and the sources
    /// read back equal the direct KCL residual.
    #[test]
    fn reformulation_is_exact(
        deltas in prop::collection::vec((-0.08f64..0.08, -0.08f64..0.08), 6),
        l1 in any::<bool>(),
    ) {
        let net = parse_feeder(THREE_PHASE).unwrap();
        let norm = if l1 { Norm::L1 } else { Norm::L2 };
        let (space, system) = build(&net, norm).unwrap();
        let v = perturbed(&net, &deltas);
        let x = assemble_point(&space, &system, &net, &v).unwrap();
        for row in &system.equalities {
            prop_assert!(row.residual(&x).abs() < 1e-10, "row {:?}", row);
        }
        prop_assert!(system.max_bilinear_residual(&x) < 1e-14);
        let r = evaluate_residual(&net, &v).unwrap();
        prop_assert!((system.objective.value(&x) - r.objective(norm)).abs() < 1e-12);
        let back = voltages_from_point(&space, &net, &x);
        for (a, b) in back.iter().flatten().zip(v.iter().flatten()) {
            prop_assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn propagated_boxes_contain_realized_values(
        lo in prop::collection::vec(-0.25f64..0.25, 12),
        width in prop::collection::vec(0.0f64..0.2, 12),
        seeds in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 50),
    ) {
        let net = parse_feeder(THREE_PHASE).unwrap();
        let (space, _) = build(&net, Norm::L2).unwrap();
        let mut b = initial_bounds(&space, &net, 0.25).unwrap();
        let loads: Vec<_> = space.node_phases.iter().filter(|n| n.lifted.is_some()).collect();
        let mut k = 0;
        for npv in &loads {
            for j in [npv.dv_re, npv.dv_im] {
                let l = lo[k];
                let u = (l + width[k]).min(0.25);
                b.set(j, Interval::new(l, u));
                k += 1;
            }
        }
        let Ok(p) = propagate_unfiltered_bounds(&space, &net, &b) else {
            return Ok(());
        };
        for (s, t) in seeds {
            for npv in &loads {
                let dr = b.lower[npv.dv_re] + s * b.width(npv.dv_re);
                let di = b.lower[npv.dv_im] + t * b.width(npv.dv_im);
                let v = npv.nominal + Complex64::new(dr, di);
                let node = &net.nodes[npv.site.node];
                let vsq = v.norm_sqr();
                if vsq < node.vmin * node.vmin || vsq > node.vmax * node.vmax {
                    continue;
                }
                let load = node.load(npv.site.phase);
                let lv = npv.lifted.unwrap();
                let tol = 1e-12;
                prop_assert!(p.lower[lv.vsq] - tol <= vsq && vsq <= p.upper[lv.vsq] + tol);
                let g = load.p / vsq;
                let bb = -load.q / vsq;
                prop_assert!(p.lower[lv.g] - tol <= g && g <= p.upper[lv.g] + tol);
                prop_assert!(p.lower[lv.b] - tol <= bb && bb <= p.upper[lv.b] + tol);
            }
        }
    }
}

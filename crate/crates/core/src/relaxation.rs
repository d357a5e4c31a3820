//! McCormick outer approximations of the bilinear terms and assembly of the
//! convex relaxation over a box.
//!
//! For `z = x·y` with `x ∈ [xL, xU]`, `y ∈ [yL, yU]`:
//!
//! ```text
//! z ≥ xU·y + x·yU − xU·yU      z ≤ xU·y + x·yL − xU·yL
//! z ≥ xL·y + x·yL − xL·yL      z ≤ xL·y + x·yU − xL·yU
//! ```
//!
//! Squares `z = x²` use the two tangents at the endpoints and the secant.

use serde::Serialize;

use crate::convex::ConvexModel;
use crate::error::{Error, Result};
use crate::formulation::{Bounds, ConstraintSystem, Norm};
use crate::rows::{compress, LinearRow, QuadRow};

/// `ci·x_i + cj·x_j + cz·z ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub ci: f64,
    pub cj: f64,
    pub cz: f64,
    pub rhs: f64,
}

impl EnvelopeRow {
    /// Positive when the row is violated.
    pub fn violation(&self, xi: f64, xj: f64, z: f64) -> f64 {
        self.ci * xi + self.cj * xj + self.cz * z - self.rhs
    }

    fn to_row(self, i: usize, j: usize, k: usize) -> LinearRow {
        LinearRow::new(
            compress(vec![(i, self.ci), (j, self.cj), (k, self.cz)]),
            self.rhs,
        )
    }
}

fn check_finite(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Envelope(format!("non-finite bound in {vals:?}")))
    }
}

/// The four McCormick rows: two under-estimators, then two over-estimators.
pub fn mccormick_bilinear(il: f64, iu: f64, jl: f64, ju: f64) -> Result<[EnvelopeRow; 4]> {
    check_finite(&[il, iu, jl, ju])?;
    if il > iu || jl > ju {
        return Err(Error::Envelope(format!(
            "inverted box [{il}, {iu}] × [{jl}, {ju}]"
        )));
    }
    Ok([
        EnvelopeRow {
            ci: ju,
            cj: iu,
            cz: -1.0,
            rhs: iu * ju,
        },
        EnvelopeRow {
            ci: jl,
            cj: il,
            cz: -1.0,
            rhs: il * jl,
        },
        EnvelopeRow {
            ci: -jl,
            cj: -iu,
            cz: 1.0,
            rhs: -iu * jl,
        },
        EnvelopeRow {
            ci: -ju,
            cj: -il,
            cz: 1.0,
            rhs: -il * ju,
        },
    ])
}

/// Tangents at `L` and `U`, then the secant. `cj` is zero.
pub fn mccormick_square(l: f64, u: f64) -> Result<[EnvelopeRow; 3]> {
    check_finite(&[l, u])?;
    if l > u {
        return Err(Error::Envelope(format!("inverted interval [{l}, {u}]")));
    }
    Ok([
        EnvelopeRow {
            ci: 2.0 * l,
            cj: 0.0,
            cz: -1.0,
            rhs: l * l,
        },
        EnvelopeRow {
            ci: 2.0 * u,
            cj: 0.0,
            cz: -1.0,
            rhs: u * u,
        },
        EnvelopeRow {
            ci: -(l + u),
            cj: 0.0,
            cz: 1.0,
            rhs: -l * u,
        },
    ])
}

/// Envelope rows tagged with the bilinear term they relax.
#[derive(Debug, Clone, Default)]
pub struct EnvelopeSet {
    pub rows: Vec<LinearRow>,
    pub term_of_row: Vec<usize>,
}

pub fn envelopes(system: &ConstraintSystem, bounds: &Bounds) -> Result<EnvelopeSet> {
    let mut set = EnvelopeSet::default();
    for (k, t) in system.bilinear.iter().enumerate() {
        let (il, iu) = (bounds.lower[t.left], bounds.upper[t.left]);
        let rows: Vec<EnvelopeRow> = if t.is_square() {
            mccormick_square(il, iu)
                .map_err(|e| Error::Envelope(format!("term {k}: {e}")))?
                .to_vec()
        } else {
            let (jl, ju) = (bounds.lower[t.right], bounds.upper[t.right]);
            mccormick_bilinear(il, iu, jl, ju)
                .map_err(|e| Error::Envelope(format!("term {k}: {e}")))?
                .to_vec()
        };
        for r in rows {
            set.rows.push(r.to_row(t.left, t.right, t.aux));
            set.term_of_row.push(k);
        }
    }
    Ok(set)
}

/// Assembles the convex relaxation of `system` over `bounds`, optionally
/// with the row `objective ≤ cutoff`.
pub fn build_relaxation(
    system: &ConstraintSystem,
    bounds: &Bounds,
    cutoff: Option<f64>,
) -> Result<ConvexModel> {
    let env = envelopes(system, bounds)?;
    let mut model = ConvexModel::new(system.n_vars);
    model.lower.clone_from(&bounds.lower);
    model.upper.clone_from(&bounds.upper);
    model.objective.clone_from(&system.objective.linear);
    model.quad_objective.clone_from(&system.objective.quadratic);
    model.equalities.clone_from(&system.equalities);
    model.inequalities.clone_from(&system.inequalities);
    model.inequalities.extend(env.rows);
    model.quadratic.clone_from(&system.quadratic);
    if let Some(c) = cutoff {
        match system.objective.norm {
            Norm::L1 => model
                .inequalities
                .push(LinearRow::new(system.objective.linear.clone(), c)),
            Norm::L2 => model.quadratic.push(QuadRow {
                squares: system
                    .objective
                    .quadratic
                    .iter()
                    .map(|&(j, q)| (j, 0.5 * q))
                    .collect(),
                linear: system.objective.linear.clone(),
                rhs: c,
            }),
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::{solve_convex, ConvexStatus};
    use crate::feeder::parse_feeder;
    use crate::formulation::{assemble_point, build, initial_bounds, nominal_voltages};
    use proptest::prelude::*;

    fn holds(rows: &[EnvelopeRow], xi: f64, xj: f64, z: f64, tol: f64) -> bool {
        rows.iter().all(|r| r.violation(xi, xj, z) <= tol)
    }

    /// Range of `z` admitted by the rows at fixed `(x_i, x_j)`.
    fn z_range(rows: &[EnvelopeRow], xi: f64, xj: f64) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for r in rows {
            let bound = (r.rhs - r.ci * xi - r.cj * xj) / r.cz;
            if r.cz < 0.0 {
                lo = lo.max(bound);
            } else {
                hi = hi.min(bound);
            }
        }
        (lo, hi)
    }

    #[test]
    fn corner_is_tight() {
        let rows = mccormick_bilinear(0.0, 2.0, 1.0, 3.0).unwrap();
        assert!(holds(&rows, 2.0, 3.0, 6.0, 0.0));
        assert_eq!(rows[0].violation(2.0, 3.0, 6.0), 0.0);
        assert_eq!(rows[2].violation(2.0, 3.0, 6.0), 0.0);
        assert_eq!(rows[3].violation(2.0, 3.0, 6.0), 0.0);
    }

    #[test]
    fn interior_point_range() {
        let rows = mccormick_bilinear(0.0, 2.0, 1.0, 3.0).unwrap();
        // At (1, 2) the envelope admits z ∈ [1, 3]; the true product 2 is inside.
        assert_eq!(z_range(&rows, 1.0, 2.0), (1.0, 3.0));
        assert!(holds(&rows, 1.0, 2.0, 2.0, 0.0));
        assert!(!holds(&rows, 1.0, 2.0, 5.0, 0.0));
    }

    #[test]
    fn fixed_factor_collapses() {
        let rows = mccormick_bilinear(1.0, 1.0, -2.0, 5.0).unwrap();
        for t in [-2.0, 0.0, 1.5, 5.0] {
            assert_eq!(z_range(&rows, 1.0, t), (t, t));
        }
    }

    #[test]
    fn square_examples() {
        let rows = mccormick_square(-1.0, 1.0).unwrap();
        assert_eq!(z_range(&rows, 0.0, 0.0), (-1.0, 1.0));
        assert_eq!(z_range(&rows, 1.0, 0.0), (1.0, 1.0));
        let rows = mccormick_square(0.75, 1.25).unwrap();
        let (lo, hi) = z_range(&rows, 1.0, 0.0);
        assert_eq!((lo, hi), (0.9375, 1.0625));
        assert!(lo <= 1.0 && 1.0 <= hi);
    }

    #[test]
    fn infinite_bounds_are_rejected() {
        assert!(mccormick_bilinear(0.0, f64::INFINITY, 0.0, 1.0).is_err());
        assert!(mccormick_square(f64::NEG_INFINITY, 0.0).is_err());
    }

    const TWO_NODE: &str = r#"{
        "base_power_va": 1e6, "base_voltage_v": 7200,
        "nodes": [
            {"id": "s", "phases": ["a"], "kind": "slack"},
            {"id": "n", "phases": ["a"], "kind": "load",
             "loads": {"a": {"p_kw": 500, "q_kvar": 100}}}
        ],
        "lines": [{"from": "s", "to": "n", "phases": ["a"],
                   "y_series_pu": {"re": [[2.0]], "im": [[-4.0]]}}]
    }"#;

    #[test]
    fn objective_shape_by_norm() {
        let net = parse_feeder(TWO_NODE).unwrap();
        for norm in [Norm::L1, Norm::L2] {
            let (space, system) = build(&net, norm).unwrap();
            let b = initial_bounds(&space, &net, 0.25).unwrap();
            let m = build_relaxation(&system, &b, None).unwrap();
            assert_eq!(m.quad_objective.is_empty(), norm == Norm::L1);
            assert_eq!(m.objective.is_empty(), norm == Norm::L2);
            let with_cut = build_relaxation(&system, &b, Some(0.1)).unwrap();
            let extra = (with_cut.inequalities.len() + with_cut.quadratic.len())
                - (m.inequalities.len() + m.quadratic.len());
            assert_eq!(extra, 1);
        }
    }

    #[test]
    fn relaxation_contains_exact_points_and_feasible_bound_is_zero() {
        // Load light enough that nominal-neighbourhood power flow is solvable.
        let text = TWO_NODE.replace("500", "100").replace("100}", "20}");
        let net = parse_feeder(&text).unwrap();
        for norm in [Norm::L1, Norm::L2] {
            let (space, system) = build(&net, norm).unwrap();
            let b = initial_bounds(&space, &net, 0.25).unwrap();
            let m = build_relaxation(&system, &b, None).unwrap();
            let x = assemble_point(&space, &system, &net, &nominal_voltages(&net)).unwrap();
            assert!(m.max_violation(&x) < 1e-12);
            let s = solve_convex(&m).unwrap();
            assert_eq!(s.status, ConvexStatus::Optimal);
            assert!(s.objective.abs() < 1e-7, "{norm}: {}", s.objective);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn bilinear_envelope_is_sound(
            a in -5.0f64..5.0, wa in 0.0f64..4.0,
            b in -5.0f64..5.0, wb in 0.0f64..4.0,
            s in 0.0f64..=1.0, t in 0.0f64..=1.0,
        ) {
            let rows = mccormick_bilinear(a, a + wa, b, b + wb).unwrap();
            let (x, y) = (a + s * wa, b + t * wb);
            prop_assert!(holds(&rows, x, y, x * y, 1e-12));
        }

        #[test]
        fn square_envelope_is_sound(a in -5.0f64..5.0, w in 0.0f64..4.0, s in 0.0f64..=1.0) {
            let rows = mccormick_square(a, a + w).unwrap();
            let x = a + s * w;
            prop_assert!(holds(&rows, x, x, x * x, 1e-12));
        }
    }
}

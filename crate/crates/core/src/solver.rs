//! Thin LP/SOCP layer over the conic interior-point backend. Every
//! optimization stage in the crate (deterministic dispatch, redispatch,
//! chance-constrained dispatch) builds its problem against this one
//! boundary, so the backend can be swapped or re-tuned in one place.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus,
    SupportedConeT::{self, NonnegativeConeT, SecondOrderConeT, ZeroConeT},
};

use crate::error::{Error, InfeasibilityReport, Result};

/// Variable handle within one [`ProblemBuilder`].
pub type Var = usize;

/// Affine expression as sparse terms plus a constant.
type Terms = Vec<(Var, f64)>;

struct SocBlock {
    /// Affine head: ||body|| <= head_terms . x + head_const.
    head_terms: Terms,
    head_const: f64,
    /// Affine body rows (terms, constant).
    body: Vec<(Terms, f64)>,
}

/// Solved primal point.
#[derive(Debug, Clone)]
pub struct Solution {
    pub objective: f64,
    values: Vec<f64>,
}

impl Solution {
    pub fn value(&self, v: Var) -> f64 {
        self.values[v]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Incremental builder for problems of the form
/// `min c.x  s.t.  lb <= x <= ub, Ax = b, Gx <= h, ||F_k x + g_k|| <= a_k.x + d_k`.
#[derive(Default)]
pub struct ProblemBuilder {
    costs: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    eqs: Vec<(Terms, f64)>,
    les: Vec<(Terms, f64)>,
    socs: Vec<SocBlock>,
}

impl ProblemBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a variable with box bounds and objective coefficient. Use
    /// infinities for unbounded sides.
    pub fn var(&mut self, lb: f64, ub: f64, cost: f64) -> Var {
        debug_assert!(lb <= ub, "variable bounds crossed: [{lb}, {ub}]");
        self.costs.push(cost);
        self.lb.push(lb);
        self.ub.push(ub);
        self.costs.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.costs.len()
    }

    /// Linear equality `terms . x = rhs`.
    pub fn eq(&mut self, terms: Terms, rhs: f64) {
        self.eqs.push((terms, rhs));
    }

    /// Linear inequality `terms . x <= rhs`.
    pub fn le(&mut self, terms: Terms, rhs: f64) {
        self.les.push((terms, rhs));
    }

    /// Second-order cone constraint
    /// `|| body ||_2 <= head_terms . x + head_const`, where each body row
    /// is an affine expression `(terms, constant)`.
    pub fn soc(&mut self, head_terms: Terms, head_const: f64, body: Vec<(Terms, f64)>) {
        self.socs.push(SocBlock {
            head_terms,
            head_const,
            body,
        });
    }

    /// Solve the assembled problem. `context` names the stage for error
    /// reporting, e.g. "market clearing (flow-based), t05".
    pub fn solve(&self, context: &str) -> Result<Solution> {
        let n = self.costs.len();

        // Rows are emitted grouped by cone: equalities (zero cone), then
        // bounds and inequalities (nonnegative), then SOC blocks.
        let mut tri_i: Vec<usize> = Vec::new();
        let mut tri_j: Vec<usize> = Vec::new();
        let mut tri_v: Vec<f64> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut row = 0usize;
        let push_row = |terms: &Terms, scale: f64, rhs: f64, row: &mut usize,
                            tri_i: &mut Vec<usize>, tri_j: &mut Vec<usize>, tri_v: &mut Vec<f64>,
                            b: &mut Vec<f64>| {
            for &(v, a) in terms {
                if a != 0.0 {
                    tri_i.push(*row);
                    tri_j.push(v);
                    tri_v.push(scale * a);
                }
            }
            b.push(rhs);
            *row += 1;
        };

        let mut n_eq = 0usize;
        for (terms, rhs) in &self.eqs {
            push_row(terms, 1.0, *rhs, &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
            n_eq += 1;
        }
        // Fixed variables become equality rows so the interior point does
        // not have to squeeze a box to width zero.
        for v in 0..n {
            if self.lb[v] == self.ub[v] && self.lb[v].is_finite() {
                push_row(&vec![(v, 1.0)], 1.0, self.lb[v], &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
                n_eq += 1;
            }
        }

        let mut n_ineq = 0usize;
        for (terms, rhs) in &self.les {
            push_row(terms, 1.0, *rhs, &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
            n_ineq += 1;
        }
        for v in 0..n {
            if self.lb[v] == self.ub[v] {
                continue;
            }
            if self.ub[v].is_finite() {
                push_row(&vec![(v, 1.0)], 1.0, self.ub[v], &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
                n_ineq += 1;
            }
            if self.lb[v].is_finite() {
                push_row(&vec![(v, -1.0)], 1.0, -self.lb[v], &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
                n_ineq += 1;
            }
        }

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if n_eq > 0 {
            cones.push(ZeroConeT(n_eq));
        }
        if n_ineq > 0 {
            cones.push(NonnegativeConeT(n_ineq));
        }
        for soc in &self.socs {
            // s_0 = head(x), s_i = body_i(x); s in SOC means s_0 >= ||s_1..||.
            push_row(&soc.head_terms, -1.0, soc.head_const, &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
            for (terms, constant) in &soc.body {
                push_row(terms, -1.0, *constant, &mut row, &mut tri_i, &mut tri_j, &mut tri_v, &mut b);
            }
            cones.push(SecondOrderConeT(1 + soc.body.len()));
        }

        let a = CscMatrix::new_from_triplets(row, n, tri_i, tri_j, tri_v);
        let p = CscMatrix::zeros((n, n));

        let settings = DefaultSettings {
            verbose: false,
            tol_feas: 1e-9,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &self.costs, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver {
                context: context.to_string(),
                status: format!("problem assembly rejected: {e:?}"),
            })?;
        solver.solve();

        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved => Ok(Solution {
                objective: sol.obj_val,
                values: sol.x.clone(),
            }),
            SolverStatus::AlmostSolved => {
                log::warn!("{context}: solver returned reduced-accuracy solution");
                Ok(Solution {
                    objective: sol.obj_val,
                    values: sol.x.clone(),
                })
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Err(Error::Infeasible(InfeasibilityReport {
                    context: context.to_string(),
                    timestep: None,
                    binding: Vec::new(),
                }))
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Err(Error::Unbounded {
                    context: context.to_string(),
                })
            }
            other => Err(Error::Solver {
                context: context.to_string(),
                status: format!("{other:?}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Two-generator merit order: cheap 50 MW at 10, expensive 100 MW at 20,
    // demand 80 -> dispatch (50, 30), cost 500 + 600 = 1100. Hand-computed.
    #[test]
    fn merit_order_lp() {
        let mut p = ProblemBuilder::new();
        let g1 = p.var(0.0, 50.0, 10.0);
        let g2 = p.var(0.0, 100.0, 20.0);
        p.eq(vec![(g1, 1.0), (g2, 1.0)], 80.0);
        let sol = p.solve("test").unwrap();
        assert_abs_diff_eq!(sol.objective, 1100.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.value(g1), 50.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.value(g2), 30.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_lp_is_reported() {
        let mut p = ProblemBuilder::new();
        let x = p.var(2.0, 10.0, 1.0);
        p.le(vec![(x, 1.0)], 1.0);
        let err = p.solve("box test").unwrap_err();
        match err {
            Error::Infeasible(report) => assert_eq!(report.context, "box test"),
            other => panic!("expected infeasible, got {other}"),
        }
    }

    #[test]
    fn unbounded_lp_is_reported() {
        let mut p = ProblemBuilder::new();
        let x = p.var(0.0, f64::INFINITY, -1.0);
        let _ = x;
        let err = p.solve("ray test").unwrap_err();
        assert!(matches!(err, Error::Unbounded { .. }), "{err}");
    }

    // min t subject to ||(3,4)|| <= t: the 3-4-5 triangle.
    #[test]
    fn soc_constant_body() {
        let mut p = ProblemBuilder::new();
        let t = p.var(f64::NEG_INFINITY, f64::INFINITY, 1.0);
        p.soc(vec![(t, 1.0)], 0.0, vec![(vec![], 3.0), (vec![], 4.0)]);
        let sol = p.solve("soc").unwrap();
        assert_abs_diff_eq!(sol.objective, 5.0, epsilon = 1e-7);
    }

    // min x subject to ||(x,3)|| <= 5: x can go down to -4.
    #[test]
    fn soc_affine_body_constant_head() {
        let mut p = ProblemBuilder::new();
        let x = p.var(f64::NEG_INFINITY, f64::INFINITY, 1.0);
        p.soc(vec![], 5.0, vec![(vec![(x, 1.0)], 0.0), (vec![], 3.0)]);
        let sol = p.solve("soc").unwrap();
        assert_abs_diff_eq!(sol.value(x), -4.0, epsilon = 1e-7);
    }

    #[test]
    fn fixed_variable_propagates() {
        let mut p = ProblemBuilder::new();
        let x = p.var(2.0, 2.0, 0.0);
        let y = p.var(0.0, 10.0, 1.0);
        // y >= x
        p.le(vec![(x, 1.0), (y, -1.0)], 0.0);
        let sol = p.solve("fixed").unwrap();
        assert_abs_diff_eq!(sol.value(y), 2.0, epsilon = 1e-7);
    }

    #[test]
    fn equalities_and_inequalities_combine() {
        // min x + y  s.t.  x + y = 4, x - y <= 1, 0 <= x,y <= 3
        // any point on the segment works; objective is pinned at 4.
        let mut p = ProblemBuilder::new();
        let x = p.var(0.0, 3.0, 1.0);
        let y = p.var(0.0, 3.0, 1.0);
        p.eq(vec![(x, 1.0), (y, 1.0)], 4.0);
        p.le(vec![(x, 1.0), (y, -1.0)], 1.0);
        let sol = p.solve("combine").unwrap();
        assert_abs_diff_eq!(sol.objective, 4.0, epsilon = 1e-6);
        assert!(sol.value(x) - sol.value(y) <= 1.0 + 1e-7);
    }
}

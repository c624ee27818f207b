//! Congestion management: redispatch the day-ahead schedule against the
//! full nodal network at a deviation price, with curtailment only allowed
//! to increase. The same single-state solve serves the deterministic D-0
//! stage and every Monte-Carlo sample.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, InfeasibilityReport, Result};
use crate::grid::{GeneratorFleet, GridCase, PtdfMatrix, SeriesData};
use crate::solver::{ProblemBuilder, Var};

use super::DispatchResult;

/// Line loadings within capacity + this margin count as feasible, so an
/// already-feasible schedule short-circuits to exact zero redispatch.
const FLOW_TOL: f64 = 1e-6;
/// Acceptable input imbalance for the short-circuit path.
const BALANCE_TOL: f64 = 1e-6;

/// The state congestion management starts from at one timestep: a
/// day-ahead schedule plus the realized availability it must be reconciled
/// with. For the deterministic D-0 stage this is the market schedule
/// verbatim; Monte-Carlo evaluation feeds in post-response states.
#[derive(Debug, Clone)]
pub struct RedispatchBasis {
    /// Day-ahead output per dispatchable unit (dispatchable order).
    pub g_da: DVector<f64>,
    /// Day-ahead curtailment per intermittent unit; curtailment can only
    /// grow beyond this floor during congestion management.
    pub c_da: DVector<f64>,
    /// Realized available infeed per intermittent unit.
    pub availability: DVector<f64>,
    /// Nodal demand.
    pub demand: DVector<f64>,
}

/// Congestion-management outcome for one timestep (or one sampled state).
#[derive(Debug, Clone)]
pub struct TimestepRedispatch {
    /// Signed redispatch per dispatchable unit (up minus down).
    pub redispatch: DVector<f64>,
    /// Final generation per dispatchable unit, `g_da + redispatch`.
    pub generation: DVector<f64>,
    /// Final curtailment per intermittent unit, >= the day-ahead value.
    pub curtailment: DVector<f64>,
    /// Final line flows.
    pub line_flows: DVector<f64>,
    /// c_red times the total redispatch volume.
    pub redispatch_cost: f64,
    /// p times the incremental curtailment beyond the day-ahead level.
    pub curtailment_delta_cost: f64,
    /// Marginal cost of the final schedule c(G).
    pub generation_cost: f64,
    /// p times the final curtailment.
    pub curtailment_cost: f64,
    /// Total redispatch volume sum(|redispatch|) in MWh.
    pub redispatch_mwh: f64,
    /// Final curtailed energy in MWh.
    pub curtailment_mwh: f64,
    /// Net imbalance of the input state absorbed by the redispatch stage
    /// (nonzero only for clamped Monte-Carlo states).
    pub imbalance_absorbed: f64,
}

/// Alias used by the Monte-Carlo evaluator for per-sample outcomes.
pub type CmOutcome = TimestepRedispatch;

/// Congestion management over the horizon.
#[derive(Debug, Clone)]
pub struct RedispatchResult {
    pub timesteps: Vec<TimestepRedispatch>,
}

impl RedispatchResult {
    pub fn total_redispatch_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.redispatch_cost).sum()
    }

    pub fn total_curtailment_delta_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.curtailment_delta_cost).sum()
    }

    pub fn total_generation_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.generation_cost).sum()
    }

    pub fn total_curtailment_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.curtailment_cost).sum()
    }

    /// Redispatch volume R over the horizon in MWh.
    pub fn total_redispatch_mwh(&self) -> f64 {
        self.timesteps.iter().map(|t| t.redispatch_mwh).sum()
    }

    /// Curtailed energy C over the horizon in MWh.
    pub fn total_curtailment_mwh(&self) -> f64 {
        self.timesteps.iter().map(|t| t.curtailment_mwh).sum()
    }

    /// Largest line overload of the final schedules, in MW (negative when
    /// everything is within limits).
    pub fn max_overload(&self, case: &GridCase) -> f64 {
        let caps = case.capacities();
        self.timesteps
            .iter()
            .map(|t| {
                (0..caps.len())
                    .map(|l| t.line_flows[l].abs() - caps[l])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Shared inputs of every single-state CM solve.
pub(crate) struct CmContext<'a> {
    pub case: &'a GridCase,
    pub fleet: &'a GeneratorFleet,
    pub ptdf: &'a PtdfMatrix,
    /// Redispatch price c_red [$/MWh].
    pub c_red: f64,
    /// Curtailment penalty p [$/MWh].
    pub p: f64,
}

fn injections_of(
    ctx: &CmContext<'_>,
    generation: &DVector<f64>,
    curtailment: &DVector<f64>,
    basis: &RedispatchBasis,
) -> DVector<f64> {
    let mut inj = DVector::zeros(ctx.case.n_nodes());
    for (k, &d) in ctx.fleet.dispatchable().iter().enumerate() {
        inj[ctx.fleet.generators()[d].node] += generation[k];
    }
    for (r, &u) in ctx.fleet.intermittent().iter().enumerate() {
        inj[ctx.fleet.generators()[u].node] += basis.availability[r] - curtailment[r];
    }
    inj -= &basis.demand;
    inj
}

fn outcome_from(
    ctx: &CmContext<'_>,
    basis: &RedispatchBasis,
    generation: DVector<f64>,
    curtailment: DVector<f64>,
    imbalance_absorbed: f64,
) -> TimestepRedispatch {
    let redispatch = &generation - &basis.g_da;
    let inj = injections_of(ctx, &generation, &curtailment, basis);
    let line_flows = ctx.ptdf.flows(&inj);
    let generation_cost: f64 = ctx
        .fleet
        .dispatchable()
        .iter()
        .enumerate()
        .map(|(k, &d)| ctx.fleet.generators()[d].marginal_cost * generation[k])
        .sum();
    let redispatch_mwh = redispatch.iter().map(|v| v.abs()).sum();
    let curtailment_mwh = curtailment.sum();
    let delta_mwh: f64 = (0..curtailment.len())
        .map(|r| (curtailment[r] - basis.c_da[r]).max(0.0))
        .sum();
    TimestepRedispatch {
        redispatch_cost: ctx.c_red * redispatch_mwh,
        curtailment_delta_cost: ctx.p * delta_mwh,
        generation_cost,
        curtailment_cost: ctx.p * curtailment_mwh,
        redispatch_mwh,
        curtailment_mwh,
        redispatch,
        generation,
        curtailment,
        line_flows,
        imbalance_absorbed,
    }
}

/// Solve congestion management for one state. Feasible states return the
/// exact zero-redispatch outcome without invoking the solver.
pub(crate) fn solve_cm_single(
    ctx: &CmContext<'_>,
    timestep_label: &str,
    basis: &RedispatchBasis,
) -> Result<TimestepRedispatch> {
    // Defensive floor: the day-ahead curtailment can exceed realized
    // availability after a downward deviation; curtailment cannot.
    let floor = DVector::from_fn(basis.c_da.len(), |r, _| basis.c_da[r].min(basis.availability[r]));

    let base_inj = injections_of(ctx, &basis.g_da, &floor, basis);
    let imbalance = base_inj.sum();
    let base_flows = ctx.ptdf.flows(&base_inj);
    let caps = ctx.case.capacities();
    let feasible = imbalance.abs() <= BALANCE_TOL
        && (0..caps.len()).all(|l| base_flows[l].abs() <= caps[l] + FLOW_TOL);
    if feasible {
        return Ok(outcome_from(ctx, basis, basis.g_da.clone(), floor, 0.0));
    }

    match solve_cm_lp(ctx, basis, &floor, false) {
        Ok((generation, curtailment)) => Ok(outcome_from(ctx, basis, generation, curtailment, imbalance)),
        Err(Error::Infeasible(_)) => {
            let binding = match solve_cm_lp(ctx, basis, &floor, true) {
                Ok(_) => Vec::new(),
                Err(Error::Infeasible(report)) => report.binding,
                Err(_) => Vec::new(),
            };
            Err(Error::Infeasible(InfeasibilityReport {
                context: "congestion management".into(),
                timestep: Some(timestep_label.to_string()),
                binding,
            }))
        }
        Err(e) => Err(e),
    }
}

/// The redispatch LP. With `elastic` set, line rows and the balance row get
/// violation slacks and the reported "result" is the list of binding rows
/// wrapped in an infeasibility error.
fn solve_cm_lp(
    ctx: &CmContext<'_>,
    basis: &RedispatchBasis,
    floor: &DVector<f64>,
    elastic: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let case = ctx.case;
    let fleet = ctx.fleet;
    let mut p = ProblemBuilder::new();
    let mut slacks: Vec<(String, Var)> = Vec::new();

    let g: Vec<Var> = fleet
        .dispatchable()
        .iter()
        .map(|&d| {
            let gen = &fleet.generators()[d];
            p.var(0.0, gen.capacity, gen.marginal_cost)
        })
        .collect();
    let up: Vec<Var> = g.iter().map(|_| p.var(0.0, f64::INFINITY, ctx.c_red)).collect();
    let down: Vec<Var> = g.iter().map(|_| p.var(0.0, f64::INFINITY, ctx.c_red)).collect();
    for (k, &d) in fleet.dispatchable().iter().enumerate() {
        // G = g_da + up - down; clamp the anchor into bounds so solver
        // noise in the market schedule cannot poison feasibility.
        let anchor = basis.g_da[k].clamp(0.0, fleet.generators()[d].capacity);
        p.eq(vec![(g[k], 1.0), (up[k], -1.0), (down[k], 1.0)], anchor);
    }
    let c: Vec<Var> = (0..fleet.intermittent().len())
        .map(|r| p.var(floor[r].max(0.0), basis.availability[r], ctx.p))
        .collect();

    let inj: Vec<Var> = (0..case.n_nodes())
        .map(|_| p.var(f64::NEG_INFINITY, f64::INFINITY, 0.0))
        .collect();
    for i in 0..case.n_nodes() {
        let mut terms = vec![(inj[i], 1.0)];
        let mut rhs = -basis.demand[i];
        for (k, &d) in fleet.dispatchable().iter().enumerate() {
            if fleet.generators()[d].node == i {
                terms.push((g[k], -1.0));
            }
        }
        for (r, &u) in fleet.intermittent().iter().enumerate() {
            if fleet.generators()[u].node == i {
                terms.push((c[r], 1.0));
                rhs += basis.availability[r];
            }
        }
        p.eq(terms, rhs);
    }
    // System balance.
    {
        let mut terms: Vec<(Var, f64)> = inj.iter().map(|&v| (v, 1.0)).collect();
        if elastic {
            let pos = p.var(0.0, f64::INFINITY, 1.0);
            let neg = p.var(0.0, f64::INFINITY, 1.0);
            terms.push((pos, 1.0));
            terms.push((neg, -1.0));
            slacks.push(("system balance".into(), pos));
            slacks.push(("system balance".into(), neg));
        }
        p.eq(terms, 0.0);
    }
    // Two-sided line limits on the full network.
    for (l, line) in case.lines().iter().enumerate() {
        let row = ctx.ptdf.matrix().row(l);
        let base: Vec<(Var, f64)> = (0..case.n_nodes())
            .filter(|&i| row[i] != 0.0)
            .map(|i| (inj[i], row[i]))
            .collect();
        for dir in [1.0, -1.0] {
            let mut terms: Vec<(Var, f64)> = base.iter().map(|&(v, a)| (v, dir * a)).collect();
            if elastic {
                let s = p.var(0.0, f64::INFINITY, 1.0);
                terms.push((s, -1.0));
                slacks.push((format!("line {}", line.id), s));
            }
            p.le(terms, line.capacity);
        }
    }

    let sol = p.solve("congestion management")?;
    if elastic {
        let mut binding: Vec<String> = slacks
            .iter()
            .filter(|(_, v)| sol.value(*v) > 1e-6)
            .map(|(name, _)| name.clone())
            .collect();
        binding.dedup();
        return Err(Error::Infeasible(InfeasibilityReport {
            context: "congestion management".into(),
            timestep: None,
            binding,
        }));
    }

    let generation = DVector::from_fn(g.len(), |k, _| {
        let cap = fleet.generators()[fleet.dispatchable()[k]].capacity;
        sol.value(g[k]).clamp(0.0, cap)
    });
    let curtailment = DVector::from_fn(c.len(), |r, _| {
        sol.value(c[r]).clamp(floor[r].max(0.0), basis.availability[r])
    });
    Ok((generation, curtailment))
}

/// Run congestion management on a market result for every timestep.
pub fn solve_redispatch(
    market: &DispatchResult,
    case: &GridCase,
    fleet: &GeneratorFleet,
    series: &SeriesData,
    ptdf: &PtdfMatrix,
    c_red: f64,
    p: f64,
) -> Result<RedispatchResult> {
    if c_red < 0.0 || p < 0.0 {
        return Err(Error::Config("redispatch and curtailment prices must be >= 0".into()));
    }
    let ctx = CmContext {
        case,
        fleet,
        ptdf,
        c_red,
        p,
    };
    let mut results: Vec<Result<TimestepRedispatch>> = Vec::new();
    (0..series.n_timesteps())
        .into_par_iter()
        .map(|t| {
            let md = &market.timesteps[t];
            let basis = RedispatchBasis {
                g_da: DVector::from_fn(fleet.dispatchable().len(), |k, _| {
                    md.generation[fleet.dispatchable()[k]]
                }),
                c_da: md.curtailment.clone(),
                availability: series.availability(t).clone(),
                demand: series.demand(t).clone(),
            };
            solve_cm_single(&ctx, &series.timesteps()[t], &basis)
        })
        .collect_into_vec(&mut results);
    let mut timesteps = Vec::with_capacity(results.len());
    for r in results {
        timesteps.push(r?);
    }
    Ok(RedispatchResult { timesteps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{solve_ed, EdProblem, NetworkRep};
    use crate::grid::{build_ptdf, GeneratorKind};
    use approx::assert_abs_diff_eq;

    /// Two nodes in one zone joined by a 50 MW line; all demand sits at n2
    /// but the cheap unit is at n1, so uniform clearing overloads the line.
    fn congested() -> (GridCase, GeneratorFleet, SeriesData) {
        let case = GridCase::new(
            vec![("n1".into(), "Z1".into()), ("n2".into(), "Z1".into())],
            vec![("L1".into(), "n1".into(), "n2".into(), 0.1, 50.0)],
            "n1",
        )
        .unwrap();
        let fleet = GeneratorFleet::new(
            &case,
            vec![
                ("g1".into(), "n1".into(), GeneratorKind::Dispatchable, 200.0, 10.0),
                ("g2".into(), "n2".into(), GeneratorKind::Dispatchable, 200.0, 40.0),
            ],
        )
        .unwrap();
        let series = SeriesData::new(
            &case,
            &fleet,
            vec!["t01".into()],
            vec![DVector::from_vec(vec![0.0, 100.0])],
            vec![DVector::zeros(0)],
        )
        .unwrap();
        (case, fleet, series)
    }

    fn ed<'a>(
        case: &'a GridCase,
        fleet: &'a GeneratorFleet,
        series: &'a SeriesData,
        ptdf: &'a PtdfMatrix,
        rep: NetworkRep<'a>,
    ) -> EdProblem<'a> {
        EdProblem {
            case,
            fleet,
            series,
            ptdf,
            rep,
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        }
    }

    // Uniform market puts 100 MW on a 50 MW line. The optimal redispatch
    // shifts exactly 50 MW from g1 to g2:
    //   c(G) = 50*10 + 50*40 = 2500, volume = 100 MWh at 30 $/MWh = 3000.
    // Verified against the brute-force oracle below.
    #[test]
    fn redispatch_matches_bruteforce_oracle() {
        let (case, fleet, series) = congested();
        let ptdf = build_ptdf(&case).unwrap();
        let market = solve_ed(&ed(&case, &fleet, &series, &ptdf, NetworkRep::Unconstrained)).unwrap();
        assert_abs_diff_eq!(market.timesteps[0].generation[0], 100.0, epsilon = 1e-5);

        let red = solve_redispatch(&market, &case, &fleet, &series, &ptdf, 30.0, 5.0).unwrap();
        let t = &red.timesteps[0];

        // brute-force oracle: move d MW from g1 to g2 on a 1 MW grid
        let mut best = f64::INFINITY;
        for d in 0..=100 {
            let d = d as f64;
            let g1 = 100.0 - d;
            let g2 = d;
            let flow = g1; // all of g1's output crosses the line
            if flow.abs() > 50.0 + 1e-9 {
                continue;
            }
            let cost = 10.0 * g1 + 40.0 * g2 + 30.0 * 2.0 * d;
            best = best.min(cost);
        }
        let total = t.generation_cost + t.redispatch_cost;
        assert_abs_diff_eq!(total, best, epsilon = 1e-3);
        assert_abs_diff_eq!(t.redispatch_mwh, 100.0, epsilon = 1e-4);
        assert_abs_diff_eq!(t.line_flows[0].abs(), 50.0, epsilon = 1e-5);
    }

    // A nodal market schedule is already feasible: the stage returns exact
    // zeros without solving.
    #[test]
    fn nodal_market_needs_no_redispatch() {
        let (case, fleet, series) = congested();
        let ptdf = build_ptdf(&case).unwrap();
        let market = solve_ed(&ed(&case, &fleet, &series, &ptdf, NetworkRep::Nodal)).unwrap();
        let red = solve_redispatch(&market, &case, &fleet, &series, &ptdf, 30.0, 5.0).unwrap();
        assert_eq!(red.total_redispatch_mwh(), 0.0);
        assert_eq!(red.total_redispatch_cost(), 0.0);
        assert!(red.max_overload(&case) <= 1e-6);
    }

    // Congestion relievable only by curtailing wind behind the bottleneck:
    // curtailment may rise above c_da (priced at p), never fall below it.
    #[test]
    fn curtailment_floor_is_respected() {
        let case = GridCase::new(
            vec![("n1".into(), "Z1".into()), ("n2".into(), "Z1".into())],
            vec![("L1".into(), "n1".into(), "n2".into(), 0.1, 30.0)],
            "n1",
        )
        .unwrap();
        let fleet = GeneratorFleet::new(
            &case,
            vec![
                ("w1".into(), "n1".into(), GeneratorKind::Intermittent, 100.0, 0.0),
                ("g1".into(), "n2".into(), GeneratorKind::Dispatchable, 200.0, 20.0),
            ],
        )
        .unwrap();
        let series = SeriesData::new(
            &case,
            &fleet,
            vec!["t01".into()],
            vec![DVector::from_vec(vec![0.0, 80.0])],
            vec![DVector::from_element(1, 80.0)],
        )
        .unwrap();
        let ptdf = build_ptdf(&case).unwrap();
        // Uniform market: wind serves all 80 MW across the 30 MW line.
        let market = solve_ed(&ed(&case, &fleet, &series, &ptdf, NetworkRep::Unconstrained)).unwrap();
        assert!(market.timesteps[0].curtailment[0] < 1e-6);
        let red = solve_redispatch(&market, &case, &fleet, &series, &ptdf, 30.0, 5.0).unwrap();
        let t = &red.timesteps[0];
        // Wind behind the 30 MW line: at most 30 MW can leave n1, so 50 MW
        // must be curtailed and g1 covers the rest.
        assert_abs_diff_eq!(t.curtailment[0], 50.0, epsilon = 1e-4);
        assert_abs_diff_eq!(t.generation[0], 50.0, epsilon = 1e-4);
        assert!(t.curtailment[0] >= market.timesteps[0].curtailment[0] - 1e-9);
        assert_abs_diff_eq!(t.curtailment_delta_cost, 250.0, epsilon = 1e-2);
        assert!(t.line_flows[0] <= 30.0 + 1e-6);
    }

    // Physically unservable demand is reported with the binding rows.
    #[test]
    fn impossible_state_is_diagnosed() {
        let (case, fleet, _series) = congested();
        let ptdf = build_ptdf(&case).unwrap();
        let ctx = CmContext {
            case: &case,
            fleet: &fleet,
            ptdf: &ptdf,
            c_red: 30.0,
            p: 5.0,
        };
        // demand 500 at n2 exceeds g2's 200 plus the 50 the line can carry
        let basis = RedispatchBasis {
            g_da: DVector::from_vec(vec![100.0, 0.0]),
            c_da: DVector::zeros(0),
            availability: DVector::zeros(0),
            demand: DVector::from_vec(vec![0.0, 500.0]),
        };
        let err = solve_cm_single(&ctx, "t01", &basis).unwrap_err();
        match err {
            Error::Infeasible(report) => {
                assert_eq!(report.timestep.as_deref(), Some("t01"));
                assert!(!report.binding.is_empty());
            }
            other => panic!("expected infeasible, got {other}"),
        }
    }
}

//! Deterministic multi-period economic dispatch under one of four network
//! representations, plus redispatch-based congestion management. Timesteps
//! carry no coupling constraints, so each one is an independent LP; the
//! horizon is solved in parallel and merged in timestep order.

mod redispatch;

pub use redispatch::{solve_redispatch, CmOutcome, RedispatchBasis, RedispatchResult, TimestepRedispatch};
pub(crate) use redispatch::{solve_cm_single, CmContext};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, InfeasibilityReport, Result};
use crate::fbmc_params::FbParameters;
use crate::grid::{GeneratorFleet, GridCase, PtdfMatrix, SeriesData};
use crate::solver::{ProblemBuilder, Var};

/// Directed zone-to-zone exchange limits in MW.
#[derive(Debug, Clone)]
pub struct NtcTable {
    limits: DMatrix<f64>,
}

impl NtcTable {
    /// The same limit on every ordered zone pair.
    pub fn uniform(n_zones: usize, mw: f64) -> Result<Self> {
        if mw < 0.0 {
            return Err(Error::Config(format!("ntc limit must be >= 0, got {mw}")));
        }
        let mut limits = DMatrix::from_element(n_zones, n_zones, mw);
        limits.fill_diagonal(0.0);
        Ok(NtcTable { limits })
    }

    /// Limits for listed ordered pairs; unlisted pairs are closed (0 MW).
    pub fn from_pairs(case: &GridCase, pairs: &[(String, String, f64)]) -> Result<Self> {
        let n = case.n_zones();
        let mut limits = DMatrix::zeros(n, n);
        for (from, to, mw) in pairs {
            let a = case
                .zone_idx(from)
                .ok_or_else(|| Error::Config(format!("ntc pair references unknown zone {from:?}")))?;
            let b = case
                .zone_idx(to)
                .ok_or_else(|| Error::Config(format!("ntc pair references unknown zone {to:?}")))?;
            if a == b {
                return Err(Error::Config(format!("ntc pair {from}->{to} is not a zone pair")));
            }
            if *mw < 0.0 {
                return Err(Error::Config(format!("ntc limit must be >= 0, got {mw} for {from}->{to}")));
            }
            limits[(a, b)] = *mw;
        }
        Ok(NtcTable { limits })
    }

    pub fn limit(&self, from: usize, to: usize) -> f64 {
        self.limits[(from, to)]
    }

    /// Copy with every limit multiplied by `factor` (for nesting sweeps).
    pub fn scaled(&self, factor: f64) -> Self {
        NtcTable {
            limits: &self.limits * factor,
        }
    }
}

/// Which network constraints the market clearing sees.
#[derive(Debug, Clone, Copy)]
pub enum NetworkRep<'a> {
    /// No network constraints at all (uniform pricing).
    Unconstrained,
    /// Full nodal representation: |PTDF . I| <= capacity on every line.
    Nodal,
    /// Bilateral exchange limits: 0 <= EX <= ntc.
    Ntc(&'a NtcTable),
    /// Flow-based domain: PTDF^z . NP <= RAM on every CNEC.
    FlowBased(&'a FbParameters),
}

impl NetworkRep<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            NetworkRep::Unconstrained => "unconstrained",
            NetworkRep::Nodal => "nodal",
            NetworkRep::Ntc(_) => "ntc",
            NetworkRep::FlowBased(_) => "flow-based",
        }
    }
}

/// One economic-dispatch problem over the whole horizon.
#[derive(Clone, Copy)]
pub struct EdProblem<'a> {
    pub case: &'a GridCase,
    pub fleet: &'a GeneratorFleet,
    pub series: &'a SeriesData,
    pub ptdf: &'a PtdfMatrix,
    pub rep: NetworkRep<'a>,
    /// Penalty p on curtailed intermittent energy [$/MWh].
    pub curtailment_penalty: f64,
    /// Small penalty on bilateral exchanges keeping EX minimal [$/MWh].
    pub exchange_penalty: f64,
}

impl EdProblem<'_> {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.curtailment_penalty < 0.0 || self.exchange_penalty < 0.0 {
            return Err(Error::Config("penalties must be >= 0".into()));
        }
        if let NetworkRep::FlowBased(fbp) = self.rep {
            if fbp.n_timesteps() != self.series.n_timesteps() {
                return Err(Error::Config(format!(
                    "flow-based parameters cover {} timesteps, horizon has {}",
                    fbp.n_timesteps(),
                    self.series.n_timesteps()
                )));
            }
        }
        Ok(())
    }
}

/// Schedule and cost decomposition of one timestep.
#[derive(Debug, Clone)]
pub struct TimestepDispatch {
    /// Output per generator in fleet order; intermittent entries are the
    /// realized infeed (availability minus curtailment).
    pub generation: DVector<f64>,
    /// Curtailment per intermittent unit (positions per
    /// `GeneratorFleet::intermittent`).
    pub curtailment: DVector<f64>,
    /// Nodal net injections implied by the schedule.
    pub injections: DVector<f64>,
    /// Zonal net-positions, exactly the row sums minus column sums of
    /// `exchanges`.
    pub net_positions: DVector<f64>,
    /// Bilateral exchanges, zones x zones, zero diagonal.
    pub exchanges: DMatrix<f64>,
    /// Physical line flows PTDF . I.
    pub line_flows: DVector<f64>,
    pub generation_cost: f64,
    pub curtailment_cost: f64,
    pub exchange_penalty_cost: f64,
}

impl TimestepDispatch {
    pub fn objective(&self) -> f64 {
        self.generation_cost + self.curtailment_cost + self.exchange_penalty_cost
    }
}

/// Market-clearing result over the horizon.
#[derive(Debug, Clone)]
pub struct DispatchResult {
    pub rep_label: String,
    pub timesteps: Vec<TimestepDispatch>,
}

impl DispatchResult {
    pub fn total_objective(&self) -> f64 {
        self.timesteps.iter().map(|t| t.objective()).sum()
    }

    pub fn total_generation_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.generation_cost).sum()
    }

    pub fn total_curtailment_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.curtailment_cost).sum()
    }

    pub fn total_exchange_penalty_cost(&self) -> f64 {
        self.timesteps.iter().map(|t| t.exchange_penalty_cost).sum()
    }

    /// Curtailed energy over the horizon in MWh (1 h steps).
    pub fn total_curtailment_mwh(&self) -> f64 {
        self.timesteps.iter().map(|t| t.curtailment.sum()).sum()
    }
}

/// Variable handles of the zonal market skeleton for one timestep. Shared
/// between the deterministic LP and the chance-constrained SOCP so the
/// degenerate-uncertainty case collapses onto the deterministic problem by
/// construction.
pub(crate) struct ZonalVars {
    /// Dispatchable outputs, in `fleet.dispatchable()` order.
    pub g: Vec<Var>,
    /// Curtailment per intermittent unit.
    pub c: Vec<Var>,
    /// Zonal net-positions (free).
    pub np: Vec<Var>,
    /// Directed exchanges, `ex[a][b]` for a != b.
    pub ex: Vec<Vec<Option<Var>>>,
}

/// Build generation, curtailment, exchange and net-position variables plus
/// (optionally) the zonal balance for timestep `t`. Network constraints are
/// added by the caller. The nodal representation skips the zonal balance:
/// it is implied by the injection definitions and the NP link, and adding
/// it again would make the equality block rank-deficient. When `elastic` is
/// set, balance rows receive slack variables (returned with labels) so
/// infeasibility can be localized.
pub(crate) fn build_zonal_skeleton(
    p: &mut ProblemBuilder,
    problem: &EdProblem<'_>,
    t: usize,
    ntc: Option<&NtcTable>,
    zonal_balance: bool,
    elastic: bool,
    slacks: &mut Vec<(String, Var)>,
) -> ZonalVars {
    let case = problem.case;
    let fleet = problem.fleet;
    let n_zones = case.n_zones();

    let g: Vec<Var> = fleet
        .dispatchable()
        .iter()
        .map(|&d| {
            let gen = &fleet.generators()[d];
            p.var(0.0, gen.capacity, gen.marginal_cost)
        })
        .collect();
    let c: Vec<Var> = fleet
        .intermittent()
        .iter()
        .enumerate()
        .map(|(r, _)| p.var(0.0, problem.series.availability(t)[r], problem.curtailment_penalty))
        .collect();
    let np: Vec<Var> = (0..n_zones)
        .map(|_| p.var(f64::NEG_INFINITY, f64::INFINITY, 0.0))
        .collect();
    let mut ex: Vec<Vec<Option<Var>>> = vec![vec![None; n_zones]; n_zones];
    for a in 0..n_zones {
        for b in 0..n_zones {
            if a == b {
                continue;
            }
            let ub = ntc.map_or(f64::INFINITY, |table| table.limit(a, b));
            ex[a][b] = Some(p.var(0.0, ub, problem.exchange_penalty));
        }
    }

    // NP_z = sum_b EX[z][b] - sum_b EX[b][z]
    for z in 0..n_zones {
        let mut terms = vec![(np[z], 1.0)];
        for b in 0..n_zones {
            if let Some(v) = ex[z][b] {
                terms.push((v, -1.0));
            }
            if let Some(v) = ex[b][z] {
                terms.push((v, 1.0));
            }
        }
        p.eq(terms, 0.0);
    }

    if !zonal_balance {
        return ZonalVars { g, c, np, ex };
    }

    // Zonal balance: dispatchable + (availability - curtailment) - demand = NP.
    for z in 0..n_zones {
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut rhs = 0.0;
        for (k, &d) in fleet.dispatchable().iter().enumerate() {
            if case.nodes()[fleet.generators()[d].node].zone == z {
                terms.push((g[k], 1.0));
            }
        }
        for (r, &u) in fleet.intermittent().iter().enumerate() {
            if case.nodes()[fleet.generators()[u].node].zone == z {
                terms.push((c[r], -1.0));
                rhs -= problem.series.availability(t)[r];
            }
        }
        for i in case.zone_nodes(z) {
            rhs += problem.series.demand(t)[i];
        }
        terms.push((np[z], -1.0));
        if elastic {
            let pos = p.var(0.0, f64::INFINITY, 1.0);
            let neg = p.var(0.0, f64::INFINITY, 1.0);
            terms.push((pos, 1.0));
            terms.push((neg, -1.0));
            slacks.push((format!("balance {}", case.zones()[z]), pos));
            slacks.push((format!("balance {}", case.zones()[z]), neg));
        }
        p.eq(terms, rhs);
    }

    ZonalVars { g, c, np, ex }
}

/// Add the network rows for timestep `t` on top of a zonal skeleton (or, for
/// the nodal representation, build the injection variables and line rows).
/// Returns the nodal injection variables when the representation defines
/// them.
fn add_network_constraints(
    p: &mut ProblemBuilder,
    problem: &EdProblem<'_>,
    t: usize,
    vars: &ZonalVars,
    elastic: bool,
    slacks: &mut Vec<(String, Var)>,
) -> Option<Vec<Var>> {
    let case = problem.case;
    let fleet = problem.fleet;
    match problem.rep {
        NetworkRep::Unconstrained | NetworkRep::Ntc(_) => None,
        NetworkRep::FlowBased(fbp) => {
            let fb = fbp.timestep(t);
            for (j, cnec) in fbp.cnecs().entries().iter().enumerate() {
                let mut terms: Vec<(Var, f64)> = Vec::new();
                for z in 0..case.n_zones() {
                    let coef = fb.ptdf_z[(j, z)];
                    if coef != 0.0 {
                        terms.push((vars.np[z], coef));
                    }
                }
                if elastic {
                    let s = p.var(0.0, f64::INFINITY, 1.0);
                    terms.push((s, -1.0));
                    slacks.push((format!("cnec {}", cnec.label()), s));
                }
                p.le(terms, fb.ram[j]);
            }
            None
        }
        NetworkRep::Nodal => {
            // Injection variables: I_i - gen@i + curt@i = avail@i - d_i.
            let inj: Vec<Var> = (0..case.n_nodes())
                .map(|_| p.var(f64::NEG_INFINITY, f64::INFINITY, 0.0))
                .collect();
            for i in 0..case.n_nodes() {
                let mut terms = vec![(inj[i], 1.0)];
                let mut rhs = -problem.series.demand(t)[i];
                for (k, &d) in fleet.dispatchable().iter().enumerate() {
                    if fleet.generators()[d].node == i {
                        terms.push((vars.g[k], -1.0));
                    }
                }
                for (r, &u) in fleet.intermittent().iter().enumerate() {
                    if fleet.generators()[u].node == i {
                        terms.push((vars.c[r], 1.0));
                        rhs += problem.series.availability(t)[r];
                    }
                }
                p.eq(terms, rhs);
            }
            // Tie zonal net-positions to nodal injections.
            for z in 0..case.n_zones() {
                let mut terms = vec![(vars.np[z], 1.0)];
                for i in case.zone_nodes(z) {
                    terms.push((inj[i], -1.0));
                }
                p.eq(terms, 0.0);
            }
            // Two-sided line limits.
            for (l, line) in case.lines().iter().enumerate() {
                let row = problem.ptdf.matrix().row(l);
                let terms: Vec<(Var, f64)> = (0..case.n_nodes())
                    .filter(|&i| row[i] != 0.0)
                    .map(|i| (inj[i], row[i]))
                    .collect();
                let neg: Vec<(Var, f64)> = terms.iter().map(|&(v, a)| (v, -a)).collect();
                if elastic {
                    let s1 = p.var(0.0, f64::INFINITY, 1.0);
                    let s2 = p.var(0.0, f64::INFINITY, 1.0);
                    let mut fwd = terms.clone();
                    fwd.push((s1, -1.0));
                    let mut bwd = neg.clone();
                    bwd.push((s2, -1.0));
                    slacks.push((format!("line {}", line.id), s1));
                    slacks.push((format!("line {}", line.id), s2));
                    p.le(fwd, line.capacity);
                    p.le(bwd, line.capacity);
                } else {
                    p.le(terms, line.capacity);
                    p.le(neg, line.capacity);
                }
            }
            Some(inj)
        }
    }
}

/// Assemble the per-timestep schedule from solved variable values. Values
/// are clamped to their exact bounds (interior-point solutions sit a hair
/// inside or outside), then injections, net-positions, flows and costs are
/// recomputed from the clamped schedule so reported numbers are mutually
/// consistent.
pub(crate) fn extract_timestep(
    problem: &EdProblem<'_>,
    t: usize,
    values: impl Fn(Var) -> f64,
    vars: &ZonalVars,
) -> TimestepDispatch {
    let case = problem.case;
    let fleet = problem.fleet;

    let mut generation = DVector::zeros(fleet.n_generators());
    let mut generation_cost = 0.0;
    for (k, &d) in fleet.dispatchable().iter().enumerate() {
        let gen = &fleet.generators()[d];
        let v = values(vars.g[k]).clamp(0.0, gen.capacity);
        generation[d] = v;
        generation_cost += gen.marginal_cost * v;
    }
    let mut curtailment = DVector::zeros(fleet.intermittent().len());
    for (r, &u) in fleet.intermittent().iter().enumerate() {
        let avail = problem.series.availability(t)[r];
        let v = values(vars.c[r]).clamp(0.0, avail);
        curtailment[r] = v;
        generation[u] = avail - v;
    }
    let curtailment_cost = problem.curtailment_penalty * curtailment.sum();

    let n_zones = case.n_zones();
    let mut exchanges = DMatrix::zeros(n_zones, n_zones);
    for a in 0..n_zones {
        for b in 0..n_zones {
            if let Some(v) = vars.ex[a][b] {
                exchanges[(a, b)] = values(v).max(0.0);
            }
        }
    }
    let exchange_penalty_cost = problem.exchange_penalty * exchanges.sum();

    let mut net_positions = DVector::zeros(n_zones);
    for z in 0..n_zones {
        net_positions[z] = exchanges.row(z).sum() - exchanges.column(z).sum();
    }

    let mut injections = DVector::zeros(case.n_nodes());
    for (g, gen) in fleet.generators().iter().enumerate() {
        injections[gen.node] += generation[g];
    }
    for i in 0..case.n_nodes() {
        injections[i] -= problem.series.demand(t)[i];
    }
    let line_flows = problem.ptdf.flows(&injections);

    TimestepDispatch {
        generation,
        curtailment,
        injections,
        net_positions,
        exchanges,
        line_flows,
        generation_cost,
        curtailment_cost,
        exchange_penalty_cost,
    }
}

fn solve_timestep(problem: &EdProblem<'_>, t: usize) -> Result<TimestepDispatch> {
    let context = format!("market clearing ({})", problem.rep.label());
    let mut p = ProblemBuilder::new();
    let mut no_slacks = Vec::new();
    let ntc = match problem.rep {
        NetworkRep::Ntc(table) => Some(table),
        _ => None,
    };
    let zonal_balance = !matches!(problem.rep, NetworkRep::Nodal);
    let vars = build_zonal_skeleton(&mut p, problem, t, ntc, zonal_balance, false, &mut no_slacks);
    add_network_constraints(&mut p, problem, t, &vars, false, &mut no_slacks);

    match p.solve(&context) {
        Ok(sol) => Ok(extract_timestep(problem, t, |v| sol.value(v), &vars)),
        Err(Error::Infeasible(_)) => Err(Error::Infeasible(diagnose_infeasibility(problem, t, &context))),
        Err(e) => Err(e),
    }
}

/// Re-solve the timestep with slack variables on balance and network rows,
/// minimizing total violation, to name the constraints that cannot be met.
fn diagnose_infeasibility(problem: &EdProblem<'_>, t: usize, context: &str) -> InfeasibilityReport {
    let timestep = problem.series.timesteps()[t].clone();
    let mut p = ProblemBuilder::new();
    let mut slacks = Vec::new();
    let ntc = match problem.rep {
        NetworkRep::Ntc(table) => Some(table),
        _ => None,
    };
    let zonal_balance = !matches!(problem.rep, NetworkRep::Nodal);
    let vars = build_zonal_skeleton(&mut p, problem, t, ntc, zonal_balance, true, &mut slacks);
    add_network_constraints(&mut p, problem, t, &vars, true, &mut slacks);

    let binding = match p.solve(&format!("{context} diagnosis")) {
        Ok(sol) => {
            let mut names: Vec<String> = slacks
                .iter()
                .filter(|(_, v)| sol.value(*v) > 1e-6)
                .map(|(name, _)| name.clone())
                .collect();
            names.dedup();
            names
        }
        Err(_) => Vec::new(),
    };
    InfeasibilityReport {
        context: context.to_string(),
        timestep: Some(timestep),
        binding,
    }
}

/// Solve the economic dispatch over the whole horizon.
pub fn solve_ed(problem: &EdProblem<'_>) -> Result<DispatchResult> {
    problem.validate()?;
    let n_t = problem.series.n_timesteps();
    let mut results: Vec<Result<TimestepDispatch>> = Vec::with_capacity(n_t);
    (0..n_t)
        .into_par_iter()
        .map(|t| solve_timestep(problem, t))
        .collect_into_vec(&mut results);
    let mut timesteps = Vec::with_capacity(n_t);
    for r in results {
        timesteps.push(r?);
    }
    Ok(DispatchResult {
        rep_label: problem.rep.label().to_string(),
        timesteps,
    })
}

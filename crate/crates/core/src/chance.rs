//! Chance-constrained zonal dispatch.
//!
//! Intermittent infeed deviates from its forecast by a zero-mean Gaussian
//! ω and dispatchable units absorb the system imbalance through affine
//! participation factors α. Requiring each generator limit and each CNEC
//! to hold with probability 1 − ε turns the dispatch LP into a
//! second-order cone program whose per-CNEC flow standard deviations T
//! yield endogenous reliability margins z_ε·T.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dispatch::{build_zonal_skeleton, extract_timestep, DispatchResult, EdProblem, NetworkRep};
use crate::error::{Error, InfeasibilityReport, Result};
use crate::fbmc_params::FbParameters;
use crate::grid::SeriesData;
use crate::solver::{ProblemBuilder, Var};

/// Covariance entries below this are treated as exactly zero, letting the
/// degenerate model collapse onto the deterministic LP.
const SIGMA_TOL: f64 = 1e-12;
/// Tiny cost on the T variables; ties them to the conic norm at the
/// optimum without measurably perturbing the objective.
const T_COST: f64 = 1e-9;

// ---------------------------------------------------------------------------
// standard normal quantile

/// Φ^{-1}(1 − eps) to absolute accuracy better than 1e-10, via the
/// rational approximations of Wichura's PPND16.
pub fn quantile_std_normal(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) || !eps.is_finite() {
        return Err(Error::Config(format!(
            "risk level must lie strictly between 0 and 1, got {eps}"
        )));
    }
    Ok(-ppnd16(eps))
}

fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Wichura (1988), algorithm AS 241, PPND16: Φ^{-1}(p).
fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.3871328727963666080e0,
        1.3314166789178437745e2,
        1.9715909503065514427e3,
        1.3731693765509461125e4,
        4.5921953931549871457e4,
        6.7265770927008700853e4,
        3.3430575583588128105e4,
        2.5090809287301226727e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.2313330701600911252e1,
        6.8718700749205790830e2,
        5.3941960214247511077e3,
        2.1213794301586595867e4,
        3.9307895800092710610e4,
        2.8729085735721942674e4,
        5.2264952788528545610e3,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734e0,
        4.63033784615654529590e0,
        5.76949722146069140550e0,
        3.64784832476320460504e0,
        1.27045825245236838258e0,
        2.41780725177450611770e-1,
        2.27238449892691845833e-2,
        7.74545014278341407640e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.05319162663775882187e0,
        1.67638483018380384940e0,
        6.89767334985100004550e-1,
        1.48103976427480074590e-1,
        1.51986665636164571966e-2,
        5.47593808499534494600e-4,
        1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.65790464350110377720e0,
        5.46378491116411436990e0,
        1.78482653991729133580e0,
        2.96560571828504891230e-1,
        2.65321895265761230930e-2,
        1.24266094738807843860e-3,
        2.71155556874348757815e-5,
        2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.99832206555887937690e-1,
        1.36929880922735805310e-1,
        1.48753612908506148525e-2,
        7.86869131145613259100e-4,
        1.84631831751005468180e-5,
        1.42151175831644588870e-7,
        2.04426310338993978564e-15,
    ];

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * polyval(&A, r) / polyval(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        polyval(&C, r) / polyval(&D, r)
    } else {
        let r = r - 5.0;
        polyval(&E, r) / polyval(&F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

// ---------------------------------------------------------------------------
// uncertainty model

/// Correlation structure of the forecast errors across intermittent units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrelationModel {
    Independent,
    /// Constant pairwise correlation ρ ∈ [0, 1).
    Constant(f64),
}

/// Gaussian forecast-error model: one covariance matrix per timestep over
/// the intermittent units, plus the risk level ε.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    eps: f64,
    z_eps: f64,
    sigma: Vec<DMatrix<f64>>,
    sqrt: Vec<DMatrix<f64>>,
    aggregate_std: Vec<f64>,
}

impl UncertaintyModel {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// z_ε = Φ^{-1}(1 − ε).
    pub fn z_eps(&self) -> f64 {
        self.z_eps
    }

    pub fn n_timesteps(&self) -> usize {
        self.sigma.len()
    }

    /// Number of intermittent units the model covers.
    pub fn dim(&self) -> usize {
        self.sigma.first().map_or(0, |m| m.nrows())
    }

    pub fn sigma(&self, t: usize) -> &DMatrix<f64> {
        &self.sigma[t]
    }

    /// Symmetric PSD square root of Σ_t.
    pub fn sqrt_factor(&self, t: usize) -> &DMatrix<f64> {
        &self.sqrt[t]
    }

    /// S_t = sqrt(eᵀ Σ_t e), the standard deviation of the total system
    /// imbalance.
    pub fn aggregate_std(&self, t: usize) -> f64 {
        self.aggregate_std[t]
    }

    /// True when Σ_t vanishes and the chance constraints degenerate.
    pub fn is_degenerate(&self, t: usize) -> bool {
        self.sigma[t].iter().all(|v| v.abs() <= SIGMA_TOL)
    }
}

/// Symmetric PSD square root with eigenvalue clipping; rejects matrices
/// that are materially indefinite.
fn psd_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.nrows() == 0 {
        return Ok(sigma.clone());
    }
    let scale = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let eigen = sigma.clone().symmetric_eigen();
    let mut values = eigen.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(Error::Config(
                "covariance matrix is not positive semidefinite".into(),
            ));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eigen.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&values) * q.transpose())
}

/// Build the forecast-error model from the availability series: per unit
/// std = relative_std · forecast, optionally with constant pairwise
/// correlation.
pub fn build_covariance(
    series: &SeriesData,
    relative_std: f64,
    correlation: CorrelationModel,
    eps: f64,
) -> Result<UncertaintyModel> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Config(format!(
            "risk level eps must lie in (0, 0.5), got {eps}"
        )));
    }
    if !(relative_std >= 0.0) || !relative_std.is_finite() {
        return Err(Error::Config(format!(
            "relative standard deviation must be >= 0, got {relative_std}"
        )));
    }
    let rho = match correlation {
        CorrelationModel::Independent => 0.0,
        CorrelationModel::Constant(rho) => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!(
                    "constant correlation must lie in [0, 1), got {rho}"
                )));
            }
            rho
        }
    };
    let z_eps = quantile_std_normal(eps)?;
    let n_t = series.n_timesteps();
    let mut sigma = Vec::with_capacity(n_t);
    let mut sqrt = Vec::with_capacity(n_t);
    let mut aggregate = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let r = series.availability(t);
        let n = r.len();
        let std: Vec<f64> = (0..n).map(|i| relative_std * r[i]).collect();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = if i == j { std[i] * std[i] } else { rho * std[i] * std[j] };
            }
        }
        let root = psd_sqrt(&m)?;
        let s2: f64 = m.iter().sum();
        aggregate.push(s2.max(0.0).sqrt());
        sigma.push(m);
        sqrt.push(root);
    }
    Ok(UncertaintyModel {
        eps,
        z_eps,
        sigma,
        sqrt,
        aggregate_std: aggregate,
    })
}

// ---------------------------------------------------------------------------
// chance-constrained dispatch

/// How participation factors are determined.
#[derive(Debug, Clone)]
pub enum AlphaMode {
    /// α are decision variables of the SOCP.
    Optimized,
    /// α fixed exogenously (one value per dispatchable unit, summing to 1),
    /// applied at every timestep.
    Fixed(DVector<f64>),
}

/// Result of the chance-constrained dispatch: the usual market quantities
/// plus participation factors and per-CNEC flow standard deviations.
#[derive(Debug, Clone)]
pub struct CcDispatchResult {
    pub dispatch: DispatchResult,
    /// Participation factors per timestep, in `fleet.dispatchable()` order.
    pub alpha: Vec<DVector<f64>>,
    /// Flow standard deviations T per CNEC and timestep, recomputed from
    /// the solved α (not the solver's possibly-slack cone variable).
    pub t_std: Vec<DVector<f64>>,
    /// z_ε used in the margins.
    pub z_eps: f64,
}

impl CcDispatchResult {
    /// Probabilistic margin z_ε·T per CNEC at timestep `t`.
    pub fn margins(&self, t: usize) -> DVector<f64> {
        self.z_eps * &self.t_std[t]
    }
}

/// The endogenous reliability margins z_ε·T_{j,t}, one vector per
/// timestep, in the shape `FbParameters::with_frm` expects.
pub fn endogenous_frm(result: &CcDispatchResult) -> Vec<DVector<f64>> {
    (0..result.t_std.len()).map(|t| result.margins(t)).collect()
}

/// Per-CNEC data that does not change across timesteps: the zonal rows
/// collapsed onto intermittent units (q) and dispatchable units (w).
struct CnecMaps {
    /// q[j][r]: sensitivity of CNEC j to a deviation of intermittent unit r.
    q: Vec<DVector<f64>>,
    /// w[j][k]: sensitivity of CNEC j to response of dispatchable unit k.
    w: Vec<DVector<f64>>,
}

fn build_cnec_maps(problem: &EdProblem<'_>, fbp: &FbParameters, t: usize) -> CnecMaps {
    let fleet = problem.fleet;
    let case = problem.case;
    let fb = fbp.timestep(t);
    let n_j = fbp.cnecs().len();
    let n_r = fleet.intermittent().len();
    let n_k = fleet.dispatchable().len();
    let mut q = Vec::with_capacity(n_j);
    let mut w = Vec::with_capacity(n_j);
    for j in 0..n_j {
        let row = fb.ptdf_z.row(j);
        let mut qj = DVector::zeros(n_r);
        for (r, &u) in fleet.intermittent().iter().enumerate() {
            let zone = case.node_zones()[fleet.generators()[u].node];
            qj[r] = row[zone];
        }
        let mut wj = DVector::zeros(n_k);
        for (k, &d) in fleet.dispatchable().iter().enumerate() {
            let zone = case.node_zones()[fleet.generators()[d].node];
            wj[k] = row[zone];
        }
        q.push(qj);
        w.push(wj);
    }
    CnecMaps { q, w }
}

/// Analytic flow standard deviation of CNEC j given participation α:
/// ‖(q_j − (w_jᵀα) e)ᵀ Σ^{1/2}‖₂.
fn flow_std(maps: &CnecMaps, j: usize, alpha: &DVector<f64>, sqrt: &DMatrix<f64>) -> f64 {
    let s = maps.w[j].dot(alpha);
    let v = &maps.q[j] - DVector::from_element(maps.q[j].len(), s);
    let body = sqrt.transpose() * v;
    body.norm()
}

struct CcTimestep {
    dispatch: crate::dispatch::TimestepDispatch,
    alpha: DVector<f64>,
    t_std: DVector<f64>,
}

fn solve_cc_timestep(
    problem: &EdProblem<'_>,
    fbp: &FbParameters,
    unc: &UncertaintyModel,
    alpha_mode: &AlphaMode,
    t: usize,
) -> Result<CcTimestep> {
    let context = "market clearing (chance-constrained flow-based)";
    match solve_cc_lp(problem, fbp, unc, alpha_mode, t, false) {
        Ok(out) => Ok(out),
        Err(Error::Infeasible(_)) => {
            let binding = match solve_cc_lp(problem, fbp, unc, alpha_mode, t, true) {
                Err(Error::Infeasible(report)) => report.binding,
                _ => Vec::new(),
            };
            Err(Error::Infeasible(InfeasibilityReport {
                context: context.into(),
                timestep: Some(problem.series.timesteps()[t].clone()),
                binding,
            }))
        }
        Err(e) => Err(e),
    }
}

fn solve_cc_lp(
    problem: &EdProblem<'_>,
    fbp: &FbParameters,
    unc: &UncertaintyModel,
    alpha_mode: &AlphaMode,
    t: usize,
    elastic: bool,
) -> Result<CcTimestep> {
    let fleet = problem.fleet;
    let n_k = fleet.dispatchable().len();
    let n_j = fbp.cnecs().len();
    let fb = fbp.timestep(t);
    let degenerate = unc.is_degenerate(t);
    let z_eps = unc.z_eps();
    let s_t = unc.aggregate_std(t);

    let mut p = ProblemBuilder::new();
    let mut slacks: Vec<(String, Var)> = Vec::new();
    let vars = build_zonal_skeleton(&mut p, problem, t, None, true, elastic, &mut slacks);

    // participation factors
    let alpha: Vec<Var> = match alpha_mode {
        AlphaMode::Optimized => (0..n_k).map(|_| p.var(0.0, 1.0, 0.0)).collect(),
        AlphaMode::Fixed(values) => values.iter().map(|&a| p.var(a, a, 0.0)).collect(),
    };
    p.eq(alpha.iter().map(|&v| (v, 1.0)).collect(), 1.0);

    // flow standard deviations; pinned to zero in the degenerate model so
    // the problem collapses to the deterministic LP
    let t_vars: Vec<Var> = (0..n_j)
        .map(|_| {
            if degenerate {
                p.var(0.0, 0.0, 0.0)
            } else {
                p.var(0.0, f64::INFINITY, T_COST)
            }
        })
        .collect();

    // generator chance constraints G ± z_ε α S ∈ [0, cap]
    if !degenerate && s_t > 0.0 {
        for (k, &d) in fleet.dispatchable().iter().enumerate() {
            let gen = &fleet.generators()[d];
            let mut up = vec![(vars.g[k], 1.0), (alpha[k], z_eps * s_t)];
            let mut down = vec![(vars.g[k], -1.0), (alpha[k], z_eps * s_t)];
            if elastic {
                let su = p.var(0.0, f64::INFINITY, 1.0);
                up.push((su, -1.0));
                slacks.push((format!("generator {}", gen.id), su));
                let sd = p.var(0.0, f64::INFINITY, 1.0);
                down.push((sd, -1.0));
                slacks.push((format!("generator {}", gen.id), sd));
            }
            p.le(up, gen.capacity);
            p.le(down, 0.0);
        }
    }

    // CNEC chance constraints, both flow directions
    for j in 0..n_j {
        let row = fb.ptdf_z.row(j);
        let base: Vec<(Var, f64)> = (0..row.len())
            .filter(|&z| row[z] != 0.0)
            .map(|z| (vars.np[z], row[z]))
            .collect();
        let label = fbp.cnecs().entries()[j].label();
        for (dir, rhs) in [(1.0, fb.ram[j]), (-1.0, fb.ram_reverse[j])] {
            let mut terms: Vec<(Var, f64)> = base.iter().map(|&(v, a)| (v, dir * a)).collect();
            terms.push((t_vars[j], z_eps));
            if elastic {
                let s = p.var(0.0, f64::INFINITY, 1.0);
                terms.push((s, -1.0));
                slacks.push((format!("cnec {label}"), s));
            }
            p.le(terms, rhs);
        }
    }

    // conic definition of T: T_j >= ||(q_j - (w_j'α) e)' Σ^{1/2}||
    let maps = build_cnec_maps(problem, fbp, t);
    if !degenerate {
        let sqrt = unc.sqrt_factor(t);
        let n_r = unc.dim();
        // u[i] = column sums of Σ^{1/2}: the imbalance direction eᵀΣ^{1/2}
        let u: Vec<f64> = (0..n_r).map(|i| sqrt.column(i).sum()).collect();
        for j in 0..n_j {
            let c: Vec<f64> = (0..n_r)
                .map(|i| maps.q[j].dot(&DVector::from_column_slice(sqrt.column(i).as_slice())))
                .collect();
            let body: Vec<(Vec<(Var, f64)>, f64)> = (0..n_r)
                .map(|i| {
                    let terms: Vec<(Var, f64)> = (0..alpha.len())
                        .filter(|&k| (u[i] * maps.w[j][k]).abs() > 0.0)
                        .map(|k| (alpha[k], -u[i] * maps.w[j][k]))
                        .collect();
                    (terms, c[i])
                })
                .collect();
            p.soc(vec![(t_vars[j], 1.0)], 0.0, body);
        }
    }

    let sol = p.solve("market clearing (chance-constrained flow-based)")?;
    if elastic {
        let mut binding: Vec<String> = slacks
            .iter()
            .filter(|(_, v)| sol.value(*v) > 1e-6)
            .map(|(name, _)| name.clone())
            .collect();
        binding.dedup();
        return Err(Error::Infeasible(InfeasibilityReport {
            context: "chance-constrained market clearing".into(),
            timestep: None,
            binding,
        }));
    }

    let dispatch = extract_timestep(problem, t, |v| sol.value(v), &vars);
    let mut a = DVector::from_fn(n_k, |k, _| sol.value(alpha[k]).max(0.0));
    let sum = a.sum();
    if sum > 0.0 {
        a /= sum;
    }
    let t_std = if degenerate {
        DVector::zeros(n_j)
    } else {
        let sqrt = unc.sqrt_factor(t);
        DVector::from_fn(n_j, |j, _| flow_std(&maps, j, &a, sqrt))
    };
    Ok(CcTimestep {
        dispatch,
        alpha: a,
        t_std,
    })
}

/// Solve the chance-constrained market clearing over the horizon. The
/// problem must carry a flow-based network representation; `unc` must
/// cover the same horizon and intermittent fleet.
pub fn solve_cc_ed(
    problem: &EdProblem<'_>,
    unc: &UncertaintyModel,
    alpha_mode: &AlphaMode,
) -> Result<CcDispatchResult> {
    problem.validate()?;
    let NetworkRep::FlowBased(fbp) = problem.rep else {
        return Err(Error::Config(
            "chance-constrained dispatch requires a flow-based network representation".into(),
        ));
    };
    if unc.n_timesteps() != problem.series.n_timesteps() {
        return Err(Error::Config(format!(
            "uncertainty model covers {} timesteps, series has {}",
            unc.n_timesteps(),
            problem.series.n_timesteps()
        )));
    }
    if unc.dim() != problem.fleet.intermittent().len() {
        return Err(Error::Config(format!(
            "uncertainty model covers {} intermittent units, fleet has {}",
            unc.dim(),
            problem.fleet.intermittent().len()
        )));
    }
    if problem.fleet.dispatchable().is_empty() {
        return Err(Error::Config(
            "chance-constrained dispatch needs at least one dispatchable generator".into(),
        ));
    }
    if let AlphaMode::Fixed(values) = alpha_mode {
        if values.len() != problem.fleet.dispatchable().len() {
            return Err(Error::Config(format!(
                "fixed alpha has {} entries, fleet has {} dispatchable units",
                values.len(),
                problem.fleet.dispatchable().len()
            )));
        }
        if values.iter().any(|a| *a < 0.0) {
            return Err(Error::Config("fixed alpha entries must be >= 0".into()));
        }
        if (values.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "fixed alpha must sum to 1, got {}",
                values.sum()
            )));
        }
    }

    let mut results: Vec<Result<CcTimestep>> = Vec::new();
    (0..problem.series.n_timesteps())
        .into_par_iter()
        .map(|t| solve_cc_timestep(problem, fbp, unc, alpha_mode, t))
        .collect_into_vec(&mut results);

    let mut timesteps = Vec::with_capacity(results.len());
    let mut alpha = Vec::with_capacity(results.len());
    let mut t_std = Vec::with_capacity(results.len());
    for r in results {
        let out = r?;
        timesteps.push(out.dispatch);
        alpha.push(out.alpha);
        t_std.push(out.t_std);
    }
    Ok(CcDispatchResult {
        dispatch: DispatchResult {
            rep_label: "chance-constrained flow-based".into(),
            timesteps,
        },
        alpha,
        t_std,
        z_eps: unc.z_eps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::solve_ed;
    use crate::fbmc_params::build_fb_parameters;
    use crate::grid::{
        build_lodf, build_ptdf, select_cnecs, GeneratorFleet, GeneratorKind, GridCase,
    };
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, SQRT_2};

    // --- oracle helpers -----------------------------------------------

    /// Taylor-series erf, accurate to ~1e-13 for |z| <= 3.
    fn erf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        for n in 1..200 {
            term *= -z * z / n as f64;
            let inc = term / (2.0 * n as f64 + 1.0);
            sum += inc;
            if inc.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / PI.sqrt()
    }

    fn normal_cdf(x: f64) -> f64 {
        // the Taylor series only converges usefully for moderate arguments;
        // beyond 6 sigma the CDF is 1 (or 0) to well below test tolerance
        if x > 6.0 {
            return 1.0;
        }
        if x < -6.0 {
            return 0.0;
        }
        0.5 * (1.0 + erf_series(x / SQRT_2))
    }

    /// Invert the series CDF by bisection.
    fn quantile_oracle(eps: f64) -> f64 {
        let target = 1.0 - eps;
        let (mut lo, mut hi) = (-8.0f64, 8.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_examples() {
        assert_abs_diff_eq!(quantile_std_normal(0.5).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            quantile_std_normal(0.05).unwrap(),
            1.6448536269514722,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            quantile_std_normal(0.025).unwrap(),
            1.959963984540054,
            epsilon = 1e-10
        );
        assert!(quantile_std_normal(0.0).is_err());
        assert!(quantile_std_normal(1.0).is_err());
        assert!(quantile_std_normal(-0.1).is_err());
        assert!(quantile_std_normal(f64::NAN).is_err());
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        let mut eps = 0.001;
        while eps < 0.999 {
            let got = quantile_std_normal(eps).unwrap();
            let want = quantile_oracle(eps);
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
            eps += 0.007;
        }
    }

    // --- covariance ----------------------------------------------------

    fn wind_series(case: &GridCase, fleet: &GeneratorFleet, avail: Vec<Vec<f64>>, demand: Vec<Vec<f64>>) -> SeriesData {
        let labels: Vec<String> = (0..demand.len()).map(|t| format!("t{:02}", t + 1)).collect();
        SeriesData::new(
            case,
            fleet,
            labels,
            demand.into_iter().map(DVector::from_vec).collect(),
            avail.into_iter().map(DVector::from_vec).collect(),
        )
        .unwrap()
    }

    /// Two zones: dispatchables at n1/n2/n3, two wind units at n2 and n3.
    fn cc_fixture() -> (GridCase, GeneratorFleet) {
        let case = GridCase::new(
            vec![
                ("n1".into(), "Z1".into()),
                ("n2".into(), "Z1".into()),
                ("n3".into(), "Z2".into()),
            ],
            vec![
                ("L1".into(), "n1".into(), "n2".into(), 0.1, 200.0),
                ("L2".into(), "n1".into(), "n3".into(), 0.1, 100.0),
                ("L3".into(), "n2".into(), "n3".into(), 0.1, 100.0),
            ],
            "n1",
        )
        .unwrap();
        let fleet = GeneratorFleet::new(
            &case,
            vec![
                ("g1".into(), "n1".into(), GeneratorKind::Dispatchable, 300.0, 10.0),
                ("g2".into(), "n2".into(), GeneratorKind::Dispatchable, 100.0, 20.0),
                ("g3".into(), "n3".into(), GeneratorKind::Dispatchable, 200.0, 35.0),
                ("w1".into(), "n2".into(), GeneratorKind::Intermittent, 150.0, 0.0),
                ("w2".into(), "n3".into(), GeneratorKind::Intermittent, 100.0, 0.0),
            ],
        )
        .unwrap();
        (case, fleet)
    }

    #[test]
    fn covariance_examples() {
        let (case, fleet) = cc_fixture();
        let series = wind_series(&case, &fleet, vec![vec![100.0, 50.0]], vec![vec![0.0, 30.0, 120.0]]);
        let unc = build_covariance(&series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        assert_abs_diff_eq!(unc.sigma(0)[(0, 0)], 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unc.sigma(0)[(1, 1)], 25.0, epsilon = 1e-12);
        assert_eq!(unc.sigma(0)[(0, 1)], 0.0);
        assert_abs_diff_eq!(unc.aggregate_std(0), 125.0f64.sqrt(), epsilon = 1e-12);

        // constant correlation fills the off-diagonal with rho σ1 σ2
        let unc = build_covariance(&series, 0.1, CorrelationModel::Constant(0.5), 0.05).unwrap();
        assert_abs_diff_eq!(unc.sigma(0)[(0, 1)], 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unc.aggregate_std(0), 175.0f64.sqrt(), epsilon = 1e-12);

        // degenerate certainty
        let unc = build_covariance(&series, 0.0, CorrelationModel::Independent, 0.05).unwrap();
        assert_eq!(unc.aggregate_std(0), 0.0);
        assert!(unc.is_degenerate(0));

        assert!(build_covariance(&series, -0.1, CorrelationModel::Independent, 0.05).is_err());
        assert!(build_covariance(&series, 0.1, CorrelationModel::Constant(1.0), 0.05).is_err());
        assert!(build_covariance(&series, 0.1, CorrelationModel::Constant(-0.2), 0.05).is_err());
        assert!(build_covariance(&series, 0.1, CorrelationModel::Independent, 0.5).is_err());
        assert!(build_covariance(&series, 0.1, CorrelationModel::Independent, 0.0).is_err());
    }

    #[test]
    fn sqrt_factor_squares_to_sigma() {
        let (case, fleet) = cc_fixture();
        let series = wind_series(&case, &fleet, vec![vec![70.0, 40.0]], vec![vec![0.0, 30.0, 120.0]]);
        for rho in [CorrelationModel::Independent, CorrelationModel::Constant(0.6)] {
            let unc = build_covariance(&series, 0.15, rho, 0.05).unwrap();
            let root = unc.sqrt_factor(0);
            let back = root * root;
            assert_abs_diff_eq!(back, *unc.sigma(0), epsilon = 1e-9);
        }
    }

    // --- chance-constrained dispatch ------------------------------------

    struct CcSetup {
        case: GridCase,
        fleet: GeneratorFleet,
        series: SeriesData,
        ptdf: crate::grid::PtdfMatrix,
        fbp: FbParameters,
    }

    fn cc_setup() -> CcSetup {
        let (case, fleet) = cc_fixture();
        let series = wind_series(
            &case,
            &fleet,
            vec![vec![50.0, 30.0]],
            vec![vec![0.0, 40.0, 150.0]],
        );
        let ptdf = build_ptdf(&case).unwrap();
        let lodf = build_lodf(&case, &ptdf).unwrap();
        let cnecs = select_cnecs(&case, &ptdf, &lodf, 1.0, 2.0, true);
        let basecase = solve_ed(&EdProblem {
            case: &case,
            fleet: &fleet,
            series: &series,
            ptdf: &ptdf,
            rep: NetworkRep::Nodal,
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        })
        .unwrap();
        let fbp = build_fb_parameters(&case, &fleet, cnecs, &basecase, 0.2, None, None).unwrap();
        CcSetup {
            case,
            fleet,
            series,
            ptdf,
            fbp,
        }
    }

    fn fb_problem<'a>(s: &'a CcSetup) -> EdProblem<'a> {
        EdProblem {
            case: &s.case,
            fleet: &s.fleet,
            series: &s.series,
            ptdf: &s.ptdf,
            rep: NetworkRep::FlowBased(&s.fbp),
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        }
    }

    #[test]
    fn zero_sigma_collapses_to_deterministic() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let det = solve_ed(&problem).unwrap();
        let unc = build_covariance(&s.series, 0.0, CorrelationModel::Independent, 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();

        let od = det.total_objective();
        let oc = cc.dispatch.total_objective();
        assert!((od - oc).abs() <= 1e-6 * od.abs().max(1.0), "{od} vs {oc}");
        for t in 0..1 {
            assert_eq!(cc.t_std[t].iter().all(|v| *v == 0.0), true);
            assert_abs_diff_eq!(cc.alpha[t].sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_responder_gets_full_participation() {
        let case = GridCase::new(
            vec![("n1".into(), "Z1".into()), ("n2".into(), "Z1".into())],
            vec![("L1".into(), "n1".into(), "n2".into(), 0.1, 500.0)],
            "n1",
        )
        .unwrap();
        let fleet = GeneratorFleet::new(
            &case,
            vec![
                ("g1".into(), "n1".into(), GeneratorKind::Dispatchable, 300.0, 10.0),
                ("w1".into(), "n2".into(), GeneratorKind::Intermittent, 100.0, 0.0),
            ],
        )
        .unwrap();
        let series = wind_series(&case, &fleet, vec![vec![60.0]], vec![vec![0.0, 150.0]]);
        let ptdf = build_ptdf(&case).unwrap();
        let lodf = build_lodf(&case, &ptdf).unwrap();
        let cnecs = select_cnecs(&case, &ptdf, &lodf, 0.05, 0.2, false);
        let basecase = solve_ed(&EdProblem {
            case: &case,
            fleet: &fleet,
            series: &series,
            ptdf: &ptdf,
            rep: NetworkRep::Nodal,
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        })
        .unwrap();
        let fbp = build_fb_parameters(&case, &fleet, cnecs, &basecase, 0.2, None, None).unwrap();
        let problem = EdProblem {
            case: &case,
            fleet: &fleet,
            series: &series,
            ptdf: &ptdf,
            rep: NetworkRep::FlowBased(&fbp),
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        };
        let unc = build_covariance(&series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
        assert_abs_diff_eq!(cc.alpha[0][0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cc_objective_dominates_deterministic() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let det = solve_ed(&problem).unwrap();
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
        assert!(
            cc.dispatch.total_objective() >= det.total_objective() - 1e-6,
            "{} < {}",
            cc.dispatch.total_objective(),
            det.total_objective()
        );
    }

    #[test]
    fn objective_monotone_in_eps() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let mut prev = f64::INFINITY;
        // decreasing eps tightens every chance constraint
        for eps in [0.2, 0.1, 0.05] {
            let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, eps).unwrap();
            let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
            let obj = cc.dispatch.total_objective();
            assert!(obj <= prev + 1e-6, "objective rose when eps increased: {obj} vs {prev}");
            prev = obj;
        }
    }

    #[test]
    fn moments_match_sampled_flow_statistics() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Constant(0.3), 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();

        let t = 0;
        let maps = build_cnec_maps(&problem, &s.fbp, t);
        let sqrt = unc.sqrt_factor(t);
        let alpha = &cc.alpha[t];
        let n_r = unc.dim();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = rand_distr::StandardNormal;

        for j in 0..s.fbp.cnecs().len() {
            let analytic = cc.t_std[t][j];
            if analytic < 1e-9 {
                continue;
            }
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let z = DVector::from_fn(n_r, |_, _| rng.sample::<f64, _>(normal));
                let omega = sqrt * z;
                let imbalance = omega.sum();
                let df = maps.q[j].dot(&omega) - maps.w[j].dot(alpha) * imbalance;
                sum += df;
                sumsq += df * df;
            }
            let mean = sum / n as f64;
            let std = (sumsq / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() <= 0.01 * analytic, "mean {mean} vs std {analytic}");
            assert!(
                (std - analytic).abs() <= 0.01 * analytic,
                "sampled std {std} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn reformulation_soundness() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let eps = 0.05;
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, eps).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
        let t = 0;
        let md = &cc.dispatch.timesteps[t];
        let s_t = unc.aggregate_std(t);
        let fb = s.fbp.timestep(t);

        // each generator limit holds with probability >= 1 - eps; units
        // with vanishing participation degenerate to deterministic bounds
        for (k, &d) in s.fleet.dispatchable().iter().enumerate() {
            let gen = &s.fleet.generators()[d];
            let g = md.generation[d];
            let sd = cc.alpha[t][k] * s_t;
            if sd > 1e-4 {
                let p_up = normal_cdf((gen.capacity - g) / sd);
                let p_down = normal_cdf(g / sd);
                assert!(p_up >= 1.0 - eps - 1e-8, "{}: up prob {p_up}", gen.id);
                assert!(p_down >= 1.0 - eps - 1e-8, "{}: down prob {p_down}", gen.id);
            } else {
                assert!(g >= -1e-6 && g <= gen.capacity + 1e-6);
            }
        }
        // each CNEC holds with probability >= 1 - eps in both directions
        for j in 0..s.fbp.cnecs().len() {
            let mean = fb.ptdf_z.row(j).transpose().dot(&md.net_positions);
            let std = cc.t_std[t][j];
            if std > 1e-9 {
                let p_fwd = normal_cdf((fb.ram[j] - mean) / std);
                let p_rev = normal_cdf((fb.ram_reverse[j] + mean) / std);
                assert!(p_fwd >= 1.0 - eps - 1e-8);
                assert!(p_rev >= 1.0 - eps - 1e-8);
            }
        }
    }

    #[test]
    fn balance_holds_under_any_realization() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
        let t = 0;
        let md = &cc.dispatch.timesteps[t];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sqrt = unc.sqrt_factor(t);
        for _ in 0..20 {
            let z = DVector::from_fn(unc.dim(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let omega = sqrt * z;
            let x = omega.sum();
            // adjusted generation minus curtailed infeed must still meet demand
            let gen_total: f64 = s
                .fleet
                .dispatchable()
                .iter()
                .enumerate()
                .map(|(k, &d)| md.generation[d] - cc.alpha[t][k] * x)
                .sum();
            let infeed: f64 = (0..unc.dim())
                .map(|r| s.series.availability(t)[r] + omega[r] - md.curtailment[r])
                .sum();
            let demand = s.series.demand(t).sum();
            assert_abs_diff_eq!(gen_total + infeed - demand, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn fixed_alpha_is_respected() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        let fixed = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Fixed(fixed.clone())).unwrap();
        assert_abs_diff_eq!(cc.alpha[0], fixed, epsilon = 1e-7);

        // validation of malformed fixed factors
        let bad_len = AlphaMode::Fixed(DVector::from_vec(vec![0.5, 0.5]));
        assert!(solve_cc_ed(&problem, &unc, &bad_len).is_err());
        let bad_sum = AlphaMode::Fixed(DVector::from_vec(vec![0.5, 0.3, 0.4]));
        assert!(solve_cc_ed(&problem, &unc, &bad_sum).is_err());
        let negative = AlphaMode::Fixed(DVector::from_vec(vec![1.5, -0.3, -0.2]));
        assert!(solve_cc_ed(&problem, &unc, &negative).is_err());
    }

    #[test]
    fn endogenous_frm_is_z_eps_times_t() {
        let s = cc_setup();
        let problem = fb_problem(&s);
        let unc = build_covariance(&s.series, 0.1, CorrelationModel::Independent, 0.05).unwrap();
        let cc = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap();
        let frm = endogenous_frm(&cc);
        assert_eq!(frm.len(), 1);
        for j in 0..s.fbp.cnecs().len() {
            assert_abs_diff_eq!(frm[0][j], cc.z_eps * cc.t_std[0][j], epsilon = 1e-12);
            assert!(frm[0][j] >= 0.0);
        }
        // z_eps itself matches the analytic quantile
        assert_abs_diff_eq!(cc.z_eps, 1.6448536269514722, epsilon = 1e-10);
    }

    #[test]
    fn margin_exceeding_capacity_is_diagnosed() {
        let case = GridCase::new(
            vec![("n1".into(), "Z1".into()), ("n2".into(), "Z1".into())],
            vec![("L1".into(), "n1".into(), "n2".into(), 0.1, 500.0)],
            "n1",
        )
        .unwrap();
        let fleet = GeneratorFleet::new(
            &case,
            vec![
                ("g1".into(), "n1".into(), GeneratorKind::Dispatchable, 100.0, 10.0),
                ("w1".into(), "n2".into(), GeneratorKind::Intermittent, 50.0, 0.0),
            ],
        )
        .unwrap();
        let series = wind_series(&case, &fleet, vec![vec![10.0]], vec![vec![0.0, 95.0]]);
        let ptdf = build_ptdf(&case).unwrap();
        let lodf = build_lodf(&case, &ptdf).unwrap();
        let cnecs = select_cnecs(&case, &ptdf, &lodf, 0.05, 0.2, false);
        let basecase = solve_ed(&EdProblem {
            case: &case,
            fleet: &fleet,
            series: &series,
            ptdf: &ptdf,
            rep: NetworkRep::Nodal,
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        })
        .unwrap();
        let fbp = build_fb_parameters(&case, &fleet, cnecs, &basecase, 0.2, None, None).unwrap();
        let problem = EdProblem {
            case: &case,
            fleet: &fleet,
            series: &series,
            ptdf: &ptdf,
            rep: NetworkRep::FlowBased(&fbp),
            curtailment_penalty: 5.0,
            exchange_penalty: 0.01,
        };
        // sigma = 2.0 * 10 MW = 20 MW: g1 must hold back 1.645*20 = 32.9 MW
        // of headroom but demand needs 85 of its 100 MW
        let unc = build_covariance(&series, 2.0, CorrelationModel::Independent, 0.05).unwrap();
        let err = solve_cc_ed(&problem, &unc, &AlphaMode::Optimized).unwrap_err();
        match err {
            Error::Infeasible(report) => {
                assert_eq!(report.timestep.as_deref(), Some("t01"));
                assert!(
                    report.binding.iter().any(|b| b.contains("generator g1") || b.contains("balance")),
                    "binding: {:?}",
                    report.binding
                );
            }
            other => panic!("expected infeasibility, got {other}"),
        }
    }
}

//! Scenario orchestration: one stage sequence per market-clearing mode
//! (basecase, flow-based parameters, D-1 clearing, D-0 congestion
//! management, Monte-Carlo evaluation), plus report assembly.
//!
//! The orchestrator itself is single-threaded; per-timestep and per-sample
//! parallelism lives in the stage solvers, which merge deterministically.

pub mod config;
pub mod report;

use std::time::Instant;

use nalgebra::DVector;

use crate::chance::{
    build_covariance, endogenous_frm, solve_cc_ed, AlphaMode, CorrelationModel,
};
use crate::dispatch::{
    solve_ed, solve_redispatch, DispatchResult, EdProblem, NetworkRep, NtcTable, RedispatchResult,
};
use crate::error::{Error, Result};
use crate::fbmc_params::{build_fb_parameters, FbParameters};
use crate::grid::{
    build_lodf, build_ptdf, load_grid_data, select_cnecs, GeneratorFleet, GridCase,
};
use crate::montecarlo::{evaluate_cm, sample_deviations, CmStatistics};

pub use config::{dataset_hash, Mode, NtcSpec, ScenarioConfig};
pub use report::{
    compare_scenarios, emit_domain_slice, emit_reports, Comparison, FileEntry, Manifest,
    McSummary, ScenarioSummary, StageCosts, Volumes,
};

/// Runtime metadata of one executed stage. Kept in memory for display and
/// assertions; never written into hashed output files.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
}

/// Everything a finished scenario run produced, with the id lists needed
/// to label exported tables.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub zones: Vec<String>,
    pub line_ids: Vec<String>,
    pub gen_ids: Vec<String>,
    pub dispatchable_ids: Vec<String>,
    pub intermittent_ids: Vec<String>,
    pub timesteps: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub basecase: Option<DispatchResult>,
    pub fb: Option<FbParameters>,
    /// Chance-constrained participation factors, per timestep.
    pub alpha: Option<Vec<DVector<f64>>>,
    /// Analytic CNEC flow standard deviations, per timestep.
    pub t_std: Option<Vec<DVector<f64>>>,
    pub z_eps: Option<f64>,
    pub market: DispatchResult,
    pub redispatch: RedispatchResult,
    pub cm: Option<CmStatistics>,
}

impl ScenarioReport {
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }
}

/// Solver selection via the FBMC_SOLVER environment variable. Only the
/// built-in conic solver is compiled in; any other request is an error
/// rather than a silent fallback.
pub fn solver_from_env() -> Result<&'static str> {
    solver_choice(std::env::var("FBMC_SOLVER").ok().as_deref())
}

fn solver_choice(requested: Option<&str>) -> Result<&'static str> {
    match requested {
        None | Some("") | Some("clarabel") => Ok("clarabel"),
        Some(other) => Err(Error::Config(format!(
            "FBMC_SOLVER={other:?} is not available; supported: clarabel"
        ))),
    }
}

fn run_stage<T>(
    stages: &mut Vec<StageRecord>,
    config_hash: &str,
    name: &str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage: name.to_string(),
        config_hash: config_hash.to_string(),
        source: Box::new(e),
    })?;
    let seconds = t0.elapsed().as_secs_f64();
    log::info!("stage {name} finished in {seconds:.3}s");
    stages.push(StageRecord {
        name: name.to_string(),
        seconds,
    });
    Ok(out)
}

struct SolverInputs<'a> {
    case: &'a GridCase,
    fleet: &'a GeneratorFleet,
    series: &'a crate::grid::SeriesData,
    ptdf: &'a crate::grid::PtdfMatrix,
    curtailment_penalty: f64,
    exchange_penalty: f64,
}

impl<'a> SolverInputs<'a> {
    // the representation may borrow data shorter-lived than the dataset
    fn ed<'b>(&'b self, rep: NetworkRep<'b>) -> EdProblem<'b> {
        EdProblem {
            case: self.case,
            fleet: self.fleet,
            series: self.series,
            ptdf: self.ptdf,
            rep,
            curtailment_penalty: self.curtailment_penalty,
            exchange_penalty: self.exchange_penalty,
        }
    }
}

fn ntc_table(case: &GridCase, spec: &NtcSpec) -> Result<NtcTable> {
    match spec {
        NtcSpec::Uniform(mw) => NtcTable::uniform(case.n_zones(), *mw),
        NtcSpec::Pairs(pairs) => NtcTable::from_pairs(case, pairs),
    }
}

fn correlation_model(rho: f64) -> CorrelationModel {
    if rho == 0.0 {
        CorrelationModel::Independent
    } else {
        CorrelationModel::Constant(rho)
    }
}

/// Capacity-weighted participation used for the real-time response when no
/// chance-constrained solve provided one.
fn pro_rata_alpha(fleet: &GeneratorFleet, n_t: usize) -> Vec<DVector<f64>> {
    let caps: Vec<f64> = fleet
        .dispatchable()
        .iter()
        .map(|&d| fleet.generators()[d].capacity)
        .collect();
    let total: f64 = caps.iter().sum();
    let one = if total > 0.0 {
        DVector::from_iterator(caps.len(), caps.iter().map(|c| c / total))
    } else {
        DVector::from_element(caps.len(), 1.0 / caps.len().max(1) as f64)
    };
    vec![one; n_t]
}

/// Execute the configured scenario end to end and return the full report.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport> {
    config.validate()?;
    solver_from_env()?;
    let config_hash = config.hash();
    let ds_hash = dataset_hash(&config.dataset)?;
    let mut stages: Vec<StageRecord> = Vec::new();
    let h = config_hash.clone();

    let (case, fleet, series) = run_stage(&mut stages, &h, "ingest", || {
        let (case, fleet, series) = load_grid_data(&config.dataset)?;
        Ok((case.scale_capacities(config.capacity_scale)?, fleet, series))
    })?;
    let ptdf = build_ptdf(&case)?;
    let inputs = SolverInputs {
        case: &case,
        fleet: &fleet,
        series: &series,
        ptdf: &ptdf,
        curtailment_penalty: config.curtailment_penalty,
        exchange_penalty: config.exchange_penalty,
    };

    let mut basecase = None;
    let mut fb = None;
    let mut alpha = None;
    let mut t_std = None;
    let mut z_eps = None;

    let market = match config.mode {
        Mode::Fbmc | Mode::FbmcPlus | Mode::FbmcCc => {
            let bc = run_stage(&mut stages, &h, "basecase", || solve_ed(&inputs.ed(NetworkRep::Nodal)))?;
            let fbp = run_stage(&mut stages, &h, "fb_parameters", || {
                let lodf = build_lodf(&case, &ptdf)?;
                let cnecs = select_cnecs(
                    &case,
                    &ptdf,
                    &lodf,
                    config.z2z_threshold,
                    config.outage_sensitivity,
                    config.cross_border_only,
                );
                build_fb_parameters(&case, &fleet, cnecs, &bc, config.minram, None, None)
            })?;
            let market = if config.mode == Mode::FbmcCc {
                let cc = run_stage(&mut stages, &h, "market_clearing", || {
                    let unc = build_covariance(
                        &series,
                        config.relative_std,
                        correlation_model(config.correlation),
                        config.epsilon,
                    )?;
                    solve_cc_ed(&inputs.ed(NetworkRep::FlowBased(&fbp)), &unc, &AlphaMode::Optimized)
                })?;
                // publish the endogenous margins as the parameter set's FRM
                fb = Some(fbp.with_frm(&endogenous_frm(&cc))?);
                alpha = Some(cc.alpha);
                t_std = Some(cc.t_std);
                z_eps = Some(cc.z_eps);
                cc.dispatch
            } else {
                let m = run_stage(&mut stages, &h, "market_clearing", || {
                    solve_ed(&inputs.ed(NetworkRep::FlowBased(&fbp)))
                })?;
                fb = Some(fbp);
                m
            };
            basecase = Some(bc);
            market
        }
        Mode::Ntc => {
            let spec = config.ntc.as_ref().expect("validated");
            let table = ntc_table(&case, spec)?;
            run_stage(&mut stages, &h, "market_clearing", || {
                solve_ed(&inputs.ed(NetworkRep::Ntc(&table)))
            })?
        }
        Mode::Nodal => run_stage(&mut stages, &h, "market_clearing", || {
            solve_ed(&inputs.ed(NetworkRep::Nodal))
        })?,
        Mode::Uniform => run_stage(&mut stages, &h, "market_clearing", || {
            solve_ed(&inputs.ed(NetworkRep::Unconstrained))
        })?,
    };

    let redispatch = run_stage(&mut stages, &h, "redispatch", || {
        solve_redispatch(
            &market,
            &case,
            &fleet,
            &series,
            &ptdf,
            config.redispatch_penalty,
            config.curtailment_penalty,
        )
    })?;

    let cm = if config.samples > 0 && !fleet.dispatchable().is_empty() {
        let response = alpha
            .clone()
            .unwrap_or_else(|| pro_rata_alpha(&fleet, series.n_timesteps()));
        Some(run_stage(&mut stages, &h, "montecarlo", || {
            let unc = build_covariance(
                &series,
                config.relative_std,
                correlation_model(config.correlation),
                config.epsilon,
            )?;
            let samples = sample_deviations(&fleet, &series, &unc, config.samples, config.seed)?;
            evaluate_cm(
                &case,
                &fleet,
                &series,
                &ptdf,
                &market,
                &response,
                &samples,
                config.redispatch_penalty,
                config.curtailment_penalty,
            )
        })?)
    } else {
        None
    };

    Ok(ScenarioReport {
        config: config.clone(),
        config_hash,
        dataset_hash: ds_hash,
        zones: case.zones().to_vec(),
        line_ids: case.lines().iter().map(|l| l.id.clone()).collect(),
        gen_ids: fleet.generators().iter().map(|g| g.id.clone()).collect(),
        dispatchable_ids: fleet
            .dispatchable()
            .iter()
            .map(|&d| fleet.generators()[d].id.clone())
            .collect(),
        intermittent_ids: fleet
            .intermittent()
            .iter()
            .map(|&u| fleet.generators()[u].id.clone())
            .collect(),
        timesteps: series.timesteps().to_vec(),
        stages,
        basecase,
        fb,
        alpha,
        t_std,
        z_eps,
        market,
        redispatch,
        cm,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::fs;
    use std::path::{Path, PathBuf};

    /// Two-zone triangle: cheap generation and wind in Z1 exporting into
    /// the Z2 load pocket over two cross-border lines.
    pub(crate) fn write_test_dataset(dir: &Path) {
        fs::write(
            dir.join("nodes.csv"),
            "node_id,zone_id,slack\nn1,Z1,1\nn2,Z1,0\nn3,Z2,0\n",
        )
        .unwrap();
        fs::write(
            dir.join("lines.csv"),
            "line_id,from,to,reactance_pu,capacity_mw\n\
             L1,n1,n2,0.10,120\nL2,n2,n3,0.12,80\nL3,n3,n1,0.12,80\n",
        )
        .unwrap();
        fs::write(
            dir.join("generators.csv"),
            "gen_id,node_id,kind,capacity_mw,cost_per_mwh\n\
             g1,n1,dispatchable,200,10\ng2,n3,dispatchable,150,30\nw1,n1,intermittent,60,0\n",
        )
        .unwrap();
        fs::write(
            dir.join("demand.csv"),
            "timestep,node_id,mw\n\
             t01,n1,0\nt01,n2,50\nt01,n3,90\n\
             t02,n1,0\nt02,n2,40\nt02,n3,110\n",
        )
        .unwrap();
        fs::write(
            dir.join("availability.csv"),
            "timestep,gen_id,mw\nt01,w1,40\nt02,w1,25\n",
        )
        .unwrap();
    }

    pub(crate) fn write_test_config(dir: &Path, mode: &str, extra: &str) -> PathBuf {
        let path = dir.join(format!("{mode}.toml"));
        let body = format!(
            "dataset = \".\"\nmode = \"{mode}\"\n\
             [market]\ncurtailment_penalty = 80.0\nredispatch_penalty = 40.0\n\
             [cnec]\nz2z_threshold = 0.02\noutage_sensitivity = 0.05\n\
             [montecarlo]\nsamples = 4\nseed = 11\n{extra}"
        );
        fs::write(&path, body).unwrap();
        path
    }

    pub(crate) fn load(dir: &Path, mode: &str, extra: &str) -> ScenarioConfig {
        let path = write_test_config(dir, mode, extra);
        ScenarioConfig::load(&path, &[]).unwrap()
    }

    #[test]
    fn nodal_mode_has_exact_zero_redispatch() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        let report = run_scenario(&load(tmp.path(), "nodal", "")).unwrap();
        assert_eq!(report.redispatch.total_redispatch_mwh(), 0.0);
        assert_eq!(report.redispatch.total_redispatch_cost(), 0.0);
        assert_eq!(
            report.stage_names(),
            ["ingest", "market_clearing", "redispatch", "montecarlo"]
        );
        assert!(report.basecase.is_none());
        assert!(report.fb.is_none());
    }

    #[test]
    fn fbmc_modes_execute_the_full_sequence() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        for mode in ["fbmc", "fbmc_plus", "fbmc_cc"] {
            let report = run_scenario(&load(tmp.path(), mode, "")).unwrap();
            assert_eq!(
                report.stage_names(),
                ["ingest", "basecase", "fb_parameters", "market_clearing", "redispatch", "montecarlo"],
                "{mode}"
            );
            assert!(report.basecase.is_some());
            let fb = report.fb.as_ref().unwrap();
            assert!(!fb.cnecs().is_empty(), "{mode}: no CNECs selected");
            if mode == "fbmc_cc" {
                assert!(report.alpha.is_some() && report.t_std.is_some());
                // published FRM is the endogenous margin z_eps * T
                let z = report.z_eps.unwrap();
                let t_std = report.t_std.as_ref().unwrap();
                for t in 0..report.timesteps.len() {
                    let frm = &fb.timestep(t).frm;
                    for j in 0..frm.len() {
                        approx::assert_abs_diff_eq!(frm[j], z * t_std[t][j], epsilon = 1e-9);
                    }
                }
            } else {
                assert!(report.alpha.is_none());
            }
        }
    }

    #[test]
    fn ntc_mode_uses_the_configured_limits() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        let tight = run_scenario(&load(tmp.path(), "ntc", "[ntc]\nuniform_mw = 10.0\n")).unwrap();
        let loose = run_scenario(&load(tmp.path(), "ntc", "[ntc]\nuniform_mw = 500.0\n")).unwrap();
        // tighter limits cannot lower the market objective
        assert!(tight.market.total_objective() >= loose.market.total_objective() - 1e-6);
        assert_eq!(tight.stage_names(), ["ingest", "market_clearing", "redispatch", "montecarlo"]);
        for t in 0..2 {
            let ex = &tight.market.timesteps[t].exchanges;
            for a in 0..2 {
                for b in 0..2 {
                    assert!(ex[(a, b)] <= 10.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn uniform_market_cost_is_a_lower_bound() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        let uniform = run_scenario(&load(tmp.path(), "uniform", "")).unwrap();
        let ntc = run_scenario(&load(tmp.path(), "ntc", "[ntc]\nuniform_mw = 30.0\n")).unwrap();
        let u = uniform.market.total_generation_cost() + uniform.market.total_curtailment_cost();
        let n = ntc.market.total_generation_cost() + ntc.market.total_curtailment_cost();
        assert!(u <= n + 1e-6, "uniform {u} vs ntc {n}");
    }

    #[test]
    fn stage_failure_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        // demand far beyond installed capacity makes the market infeasible
        fs::write(
            tmp.path().join("demand.csv"),
            "timestep,node_id,mw\nt01,n1,0\nt01,n2,5000\nt01,n3,90\n",
        )
        .unwrap();
        fs::write(tmp.path().join("availability.csv"), "timestep,gen_id,mw\nt01,w1,40\n").unwrap();
        let config = load(tmp.path(), "uniform", "");
        let err = run_scenario(&config).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage market_clearing"), "{msg}");
        assert!(msg.contains(&config.hash()[..8]), "{msg}");
        assert!(matches!(err.root(), Error::Infeasible(_)));
    }

    #[test]
    fn solver_choice_validates() {
        assert_eq!(solver_choice(None).unwrap(), "clarabel");
        assert_eq!(solver_choice(Some("clarabel")).unwrap(), "clarabel");
        let err = solver_choice(Some("gurobi")).unwrap_err().to_string();
        assert!(err.contains("gurobi"), "{err}");
    }

    #[test]
    fn montecarlo_stage_respects_sample_count_and_alpha_source() {
        let tmp = tempfile::tempdir().unwrap();
        write_test_dataset(tmp.path());
        let report = run_scenario(&load(tmp.path(), "fbmc", "")).unwrap();
        let cm = report.cm.as_ref().unwrap();
        assert_eq!(cm.samples.len() + cm.infeasible_samples.len(), 4);
        // samples = 0 skips the stage entirely
        let path = write_test_config(tmp.path(), "fbmc", "");
        let none = ScenarioConfig::load(&path, &[("montecarlo.samples".into(), "0".into())]).unwrap();
        let report = run_scenario(&none).unwrap();
        assert!(report.cm.is_none());
        assert_eq!(
            report.stage_names(),
            ["ingest", "basecase", "fb_parameters", "market_clearing", "redispatch"]
        );
    }
}

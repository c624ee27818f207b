//! Monte-Carlo evaluation of congestion management under forecast error.
//!
//! Draws real-time deviations ω of the intermittent infeed, applies the
//! affine generator response, reruns the redispatch stage on every
//! realized state, and aggregates cost statistics across samples.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chance::UncertaintyModel;
use crate::dispatch::{solve_cm_single, CmContext, DispatchResult, RedispatchBasis};
use crate::error::{Error, Result};
use crate::grid::{GeneratorFleet, GridCase, PtdfMatrix, SeriesData};

/// One sampled trajectory of forecast deviations over the horizon.
#[derive(Debug, Clone)]
pub struct DeviationSample {
    pub sample_id: u64,
    /// Base seed the sample was drawn from (stream = sample_id).
    pub seed: u64,
    /// Deviation per timestep over the intermittent units, after clamping
    /// realized infeed into [0, capacity].
    pub omega: Vec<DVector<f64>>,
    /// Total |MW| the clamping removed across the horizon.
    pub clamping_mass: f64,
}

/// Draw `n_samples` deviation trajectories: ω_t ~ N(0, Σ_t) independently
/// per timestep, reproducible from (seed, sample_id) regardless of
/// parallelism. Realized infeed r_t + ω_t is clamped into [0, capacity]
/// and the clamped mass recorded.
pub fn sample_deviations(
    fleet: &GeneratorFleet,
    series: &SeriesData,
    unc: &UncertaintyModel,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<DeviationSample>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    if unc.n_timesteps() != series.n_timesteps() {
        return Err(Error::Config(format!(
            "uncertainty model covers {} timesteps, series has {}",
            unc.n_timesteps(),
            series.n_timesteps()
        )));
    }
    let caps: Vec<f64> = fleet
        .intermittent()
        .iter()
        .map(|&u| fleet.generators()[u].capacity)
        .collect();
    if unc.dim() != caps.len() {
        return Err(Error::Config(format!(
            "uncertainty model covers {} units, fleet has {} intermittent",
            unc.dim(),
            caps.len()
        )));
    }
    let n_r = caps.len();
    let mut samples = Vec::with_capacity(n_samples);
    for sample_id in 0..n_samples as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample_id);
        let mut omega = Vec::with_capacity(series.n_timesteps());
        let mut mass = 0.0;
        for t in 0..series.n_timesteps() {
            let z = DVector::from_fn(n_r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let mut w = unc.sqrt_factor(t) * z;
            let r = series.availability(t);
            for i in 0..n_r {
                let clamped = w[i].clamp(-r[i], caps[i] - r[i]);
                mass += (clamped - w[i]).abs();
                w[i] = clamped;
            }
            omega.push(w);
        }
        if mass > 0.0 {
            log::debug!("sample {sample_id}: clamped {mass:.3} MW of deviation mass");
        }
        samples.push(DeviationSample {
            sample_id,
            seed,
            omega,
            clamping_mass: mass,
        });
    }
    Ok(samples)
}

/// The market schedule after the real-time response to one sampled
/// deviation: the congestion-management starting state plus bookkeeping.
#[derive(Debug, Clone)]
pub struct RealtimeState {
    /// Post-response schedule and realized availability, ready for CM.
    pub basis: RedispatchBasis,
    /// Nodal injections of the responded state.
    pub injections: DVector<f64>,
    /// eᵀI of the state: nonzero only when response clamping (or floor
    /// clamping of day-ahead curtailment) breaks the balance; the CM stage
    /// absorbs it as priced redispatch.
    pub residual_imbalance: f64,
}

/// Apply the affine response to one sampled deviation at timestep `t`:
/// G(ω) = g_da − α (eᵀω), clamped into [0, capacity]; realized infeed is
/// r_t + ω_t with the day-ahead curtailment still in place.
pub fn realtime_state(
    market: &DispatchResult,
    fleet: &GeneratorFleet,
    series: &SeriesData,
    alpha: &DVector<f64>,
    sample: &DeviationSample,
    t: usize,
) -> RealtimeState {
    let md = &market.timesteps[t];
    let omega = &sample.omega[t];
    let imbalance: f64 = omega.sum();

    let n_k = fleet.dispatchable().len();
    let g_da = DVector::from_fn(n_k, |k, _| {
        let d = fleet.dispatchable()[k];
        let cap = fleet.generators()[d].capacity;
        (md.generation[d] - alpha[k] * imbalance).clamp(0.0, cap)
    });
    let availability = DVector::from_fn(omega.len(), |r, _| {
        let u = fleet.intermittent()[r];
        let cap = fleet.generators()[u].capacity;
        (series.availability(t)[r] + omega[r]).clamp(0.0, cap)
    });
    let c_da = DVector::from_fn(omega.len(), |r, _| md.curtailment[r].min(availability[r]));

    let demand = series.demand(t).clone();
    let mut injections = DVector::zeros(demand.len());
    for (k, &d) in fleet.dispatchable().iter().enumerate() {
        injections[fleet.generators()[d].node] += g_da[k];
    }
    for (r, &u) in fleet.intermittent().iter().enumerate() {
        injections[fleet.generators()[u].node] += availability[r] - c_da[r];
    }
    injections -= &demand;
    let residual = injections.sum();
    if residual.abs() > 1e-6 {
        log::debug!(
            "sample {} t {t}: response clamping left {residual:.3} MW imbalance for CM",
            sample.sample_id
        );
    }
    RealtimeState {
        basis: RedispatchBasis {
            g_da,
            c_da,
            availability,
            demand,
        },
        injections,
        residual_imbalance: residual,
    }
}

/// Per-timestep cost envelope across samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Congestion-management costs of one feasible sample, per timestep.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample_id: u64,
    pub redispatch_cost: Vec<f64>,
    /// Final curtailment cost p·C of the CM stage.
    pub curtailment_cost: Vec<f64>,
    /// Cost of curtailment added on top of the day-ahead level.
    pub curtailment_delta_cost: Vec<f64>,
    pub redispatch_mwh: Vec<f64>,
    pub curtailment_mwh: Vec<f64>,
}

impl SampleOutcome {
    /// CM cost at `t`: redispatch plus incremental curtailment.
    pub fn cm_cost(&self, t: usize) -> f64 {
        self.redispatch_cost[t] + self.curtailment_delta_cost[t]
    }

    pub fn total_cm_cost(&self) -> f64 {
        (0..self.redispatch_cost.len()).map(|t| self.cm_cost(t)).sum()
    }
}

/// Aggregated Monte-Carlo congestion-management statistics.
#[derive(Debug, Clone)]
pub struct CmStatistics {
    /// Feasible samples in sample-id order.
    pub samples: Vec<SampleOutcome>,
    /// Samples whose CM stage was infeasible, recorded and excluded.
    pub infeasible_samples: Vec<u64>,
    /// Per-timestep CM-cost envelope over the feasible samples.
    pub envelope: Vec<Envelope>,
    /// CM cost per timestep of the deterministic ω = 0 state.
    pub deterministic: Vec<f64>,
    /// Σ_t of the per-timestep means; the headline expected CM cost.
    pub mean_total_cm_cost: f64,
    /// Mean redispatch volume R over samples [MWh].
    pub mean_redispatch_mwh: f64,
    /// Mean curtailed energy C over samples [MWh].
    pub mean_curtailment_mwh: f64,
}

impl CmStatistics {
    /// Table-style decomposition (C, R, C+R) in MWh.
    pub fn volume_decomposition(&self) -> (f64, f64, f64) {
        (
            self.mean_curtailment_mwh,
            self.mean_redispatch_mwh,
            self.mean_curtailment_mwh + self.mean_redispatch_mwh,
        )
    }
}

/// Run congestion management for every sample and aggregate. `alpha` is
/// one participation vector per timestep (eᵀα = 1); individual infeasible
/// samples are recorded and excluded without aborting the batch.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cm(
    case: &GridCase,
    fleet: &GeneratorFleet,
    series: &SeriesData,
    ptdf: &PtdfMatrix,
    market: &DispatchResult,
    alpha: &[DVector<f64>],
    samples: &[DeviationSample],
    c_red: f64,
    p: f64,
) -> Result<CmStatistics> {
    let n_t = series.n_timesteps();
    if market.timesteps.len() != n_t {
        return Err(Error::Config(format!(
            "market result covers {} timesteps, series has {n_t}",
            market.timesteps.len()
        )));
    }
    if alpha.len() != n_t {
        return Err(Error::Config(format!(
            "alpha covers {} timesteps, series has {n_t}",
            alpha.len()
        )));
    }
    let n_k = fleet.dispatchable().len();
    for (t, a) in alpha.iter().enumerate() {
        if a.len() != n_k {
            return Err(Error::Config(format!(
                "alpha at timestep {t} has {} entries, expected {n_k}",
                a.len()
            )));
        }
        if (a.sum() - 1.0).abs() > 1e-6 || a.iter().any(|v| *v < 0.0) {
            return Err(Error::Config(format!(
                "alpha at timestep {t} must be nonnegative and sum to 1"
            )));
        }
    }

    let ctx = CmContext {
        case,
        fleet,
        ptdf,
        c_red,
        p,
    };

    // deterministic ω = 0 baseline
    let mut deterministic = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let md = &market.timesteps[t];
        let basis = RedispatchBasis {
            g_da: DVector::from_fn(n_k, |k, _| md.generation[fleet.dispatchable()[k]]),
            c_da: md.curtailment.clone(),
            availability: series.availability(t).clone(),
            demand: series.demand(t).clone(),
        };
        let out = solve_cm_single(&ctx, &series.timesteps()[t], &basis)?;
        deterministic.push(out.redispatch_cost + out.curtailment_delta_cost);
    }

    // per-sample CM, parallel over samples, merged in sample-id order
    let mut runs: Vec<std::result::Result<SampleOutcome, u64>> = Vec::new();
    samples
        .par_iter()
        .map(|sample| {
            let mut outcome = SampleOutcome {
                sample_id: sample.sample_id,
                redispatch_cost: Vec::with_capacity(n_t),
                curtailment_cost: Vec::with_capacity(n_t),
                curtailment_delta_cost: Vec::with_capacity(n_t),
                redispatch_mwh: Vec::with_capacity(n_t),
                curtailment_mwh: Vec::with_capacity(n_t),
            };
            for t in 0..n_t {
                let state = realtime_state(market, fleet, series, &alpha[t], sample, t);
                match solve_cm_single(&ctx, &series.timesteps()[t], &state.basis) {
                    Ok(cm) => {
                        outcome.redispatch_cost.push(cm.redispatch_cost);
                        outcome.curtailment_cost.push(cm.curtailment_cost);
                        outcome.curtailment_delta_cost.push(cm.curtailment_delta_cost);
                        outcome.redispatch_mwh.push(cm.redispatch_mwh);
                        outcome.curtailment_mwh.push(cm.curtailment_mwh);
                    }
                    Err(Error::Infeasible(report)) => {
                        log::warn!(
                            "sample {} infeasible at timestep {}: {report}",
                            sample.sample_id,
                            series.timesteps()[t]
                        );
                        return Err(sample.sample_id);
                    }
                    Err(e) => {
                        log::warn!("sample {} failed: {e}", sample.sample_id);
                        return Err(sample.sample_id);
                    }
                }
            }
            Ok(outcome)
        })
        .collect_into_vec(&mut runs);

    let mut feasible = Vec::new();
    let mut infeasible = Vec::new();
    for run in runs {
        match run {
            Ok(outcome) => feasible.push(outcome),
            Err(id) => infeasible.push(id),
        }
    }

    let mut envelope = Vec::with_capacity(n_t);
    let mut mean_total = 0.0;
    for t in 0..n_t {
        if feasible.is_empty() {
            envelope.push(Envelope {
                min: 0.0,
                mean: 0.0,
                max: 0.0,
            });
            continue;
        }
        let costs: Vec<f64> = feasible.iter().map(|s| s.cm_cost(t)).collect();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        mean_total += mean;
        envelope.push(Envelope { min, mean, max });
    }
    let mean_redispatch_mwh = if feasible.is_empty() {
        0.0
    } else {
        feasible.iter().map(|s| s.redispatch_mwh.iter().sum::<f64>()).sum::<f64>()
            / feasible.len() as f64
    };
    let mean_curtailment_mwh = if feasible.is_empty() {
        0.0
    } else {
        feasible.iter().map(|s| s.curtailment_mwh.iter().sum::<f64>()).sum::<f64>()
            / feasible.len() as f64
    };

    if !infeasible.is_empty() {
        log::warn!(
            "{} of {} samples infeasible and excluded",
            infeasible.len(),
            samples.len()
        );
    }
    Ok(CmStatistics {
        samples: feasible,
        infeasible_samples: infeasible,
        envelope,
        deterministic,
        mean_total_cm_cost: mean_total,
        mean_redispatch_mwh,
        mean_curtailment_mwh,
    })
}

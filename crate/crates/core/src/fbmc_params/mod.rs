//! Flow-based market coupling parameters.
//!
//! From a nodal basecase dispatch this module derives, per timestep, the
//! quantities the zonal market sees: a generation shift key mapping zonal
//! net-position changes to nodal injections, zonal PTDFs on the selected
//! CNECs, reference flows, and remaining available margins with FRM, FAV
//! and minRAM corrections applied.

mod domain;

pub use domain::{fb_domain_slice, DomainSlice, Halfplane};

use nalgebra::{DMatrix, DVector};

use crate::dispatch::DispatchResult;
use crate::error::{Error, Result};
use crate::grid::{CnecSet, GeneratorFleet, GridCase};

/// Basecase output above which a dispatchable unit counts as online for
/// the Pro-Rata weighting.
const ONLINE_TOL: f64 = 1e-3;

/// Generation shift key for one timestep: how a 1 MW change of a zone's
/// net position distributes over that zone's nodes.
#[derive(Debug, Clone)]
pub struct Gsk {
    /// Nodes x zones; every column sums to 1 and is zero outside its zone.
    pub matrix: DMatrix<f64>,
    /// Timestep index this key was computed for.
    pub timestep: usize,
    /// Per zone, the fallback used when the Pro-Rata weighting was not
    /// applicable; None means online-capacity weights were used.
    pub fallbacks: Vec<Option<GskFallback>>,
}

/// Why a zone could not use online-capacity GSK weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GskFallback {
    /// Nothing online: weighted by installed dispatchable capacity instead.
    InstalledCapacity,
    /// No dispatchable capacity at all: uniform weights over the zone's nodes.
    Uniform,
}

/// Flow-based parameters for one timestep.
#[derive(Debug, Clone)]
pub struct FbTimestep {
    /// Zonal PTDF, CNEC x zones.
    pub ptdf_z: DMatrix<f64>,
    /// Remaining available margin per CNEC in the defined flow direction.
    pub ram: DVector<f64>,
    /// Margin against the opposite flow direction; the one-sided market
    /// constraint ignores it, the chance-constrained variant does not.
    pub ram_reverse: DVector<f64>,
    /// Reference flows f_ref per CNEC.
    pub f_ref: DVector<f64>,
    /// Flow reliability margin per CNEC.
    pub frm: DVector<f64>,
    /// Final adjustment value per CNEC.
    pub fav: DVector<f64>,
}

/// Flow-based parameters over the horizon, tied to the CnecSet they were
/// computed for.
#[derive(Debug, Clone)]
pub struct FbParameters {
    cnecs: CnecSet,
    minram: f64,
    zones: Vec<String>,
    timesteps: Vec<FbTimestep>,
}

impl FbParameters {
    pub fn cnecs(&self) -> &CnecSet {
        &self.cnecs
    }

    /// Zone names in PTDF column order.
    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn minram(&self) -> f64 {
        self.minram
    }

    pub fn n_timesteps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timestep(&self, t: usize) -> &FbTimestep {
        &self.timesteps[t]
    }

    /// Replace the FRM column at every timestep and recompute the margins.
    /// This is how endogenous probabilistic margins enter a deterministic
    /// market run: parameters stay identical except FRM and RAM.
    pub fn with_frm(&self, frm: &[DVector<f64>]) -> Result<FbParameters> {
        if frm.len() != self.timesteps.len() {
            return Err(Error::Config(format!(
                "FRM series covers {} timesteps, parameters have {}",
                frm.len(),
                self.timesteps.len()
            )));
        }
        let mut timesteps = Vec::with_capacity(self.timesteps.len());
        for (t, ts) in self.timesteps.iter().enumerate() {
            let f = &frm[t];
            if f.len() != self.cnecs.len() {
                return Err(Error::Config(format!(
                    "FRM vector at timestep {t} has {} entries, expected {}",
                    f.len(),
                    self.cnecs.len()
                )));
            }
            if f.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Config(format!("FRM at timestep {t} must be finite and >= 0")));
            }
            timesteps.push(FbTimestep {
                ptdf_z: ts.ptdf_z.clone(),
                ram: compute_ram(&self.cnecs, f, &ts.fav, &ts.f_ref, self.minram),
                ram_reverse: compute_ram_reverse(&self.cnecs, f, &ts.fav, &ts.f_ref, self.minram),
                f_ref: ts.f_ref.clone(),
                frm: f.clone(),
                fav: ts.fav.clone(),
            });
        }
        Ok(FbParameters {
            cnecs: self.cnecs.clone(),
            minram: self.minram,
            zones: self.zones.clone(),
            timesteps,
        })
    }
}

/// Pro-Rata generation shift key: within each zone, nodes are weighted by
/// the installed capacity of dispatchable units that are online at `t` in
/// the basecase. Zones with nothing online fall back to installed-capacity
/// weights; zones without dispatchable capacity fall back to uniform node
/// weights. Both fallbacks log a warning.
pub fn gsk_pro_rata(
    case: &GridCase,
    fleet: &GeneratorFleet,
    basecase: &DispatchResult,
    t: usize,
) -> Gsk {
    let bc = &basecase.timesteps[t].generation;
    let mut matrix = DMatrix::zeros(case.n_nodes(), case.n_zones());
    let mut fallbacks = vec![None; case.n_zones()];
    for (z, zone) in case.zones().iter().enumerate() {
        let nodes = case.zone_nodes(z);
        let mut online = vec![0.0; nodes.len()];
        let mut installed = vec![0.0; nodes.len()];
        for &gidx in fleet.dispatchable() {
            let gen = &fleet.generators()[gidx];
            let Some(pos) = nodes.iter().position(|&n| n == gen.node) else {
                continue;
            };
            installed[pos] += gen.capacity;
            if bc[gidx] > ONLINE_TOL {
                online[pos] += gen.capacity;
            }
        }
        let online_total: f64 = online.iter().sum();
        let installed_total: f64 = installed.iter().sum();
        let weights: Vec<f64> = if online_total > 0.0 {
            online.iter().map(|w| w / online_total).collect()
        } else if installed_total > 0.0 {
            log::debug!(
                "zone {zone}: no dispatchable unit online at timestep {t}, \
                 falling back to installed-capacity GSK weights"
            );
            fallbacks[z] = Some(GskFallback::InstalledCapacity);
            installed.iter().map(|w| w / installed_total).collect()
        } else {
            log::debug!(
                "zone {zone}: no dispatchable capacity, falling back to uniform GSK weights"
            );
            fallbacks[z] = Some(GskFallback::Uniform);
            vec![1.0 / nodes.len() as f64; nodes.len()]
        };
        for (pos, &node) in nodes.iter().enumerate() {
            matrix[(node, z)] = weights[pos];
        }
    }
    Gsk { matrix, timestep: t, fallbacks }
}

/// Zonal PTDF: the effective nodal CNEC sensitivities composed with the
/// shift key, CNEC x zones.
pub fn zonal_ptdf(cnecs: &CnecSet, gsk: &Gsk) -> DMatrix<f64> {
    cnecs.effective_ptdf() * &gsk.matrix
}

/// Reference flows: the part of the basecase CNEC loading the zonal model
/// cannot express, f_ref = f_bc - PTDF_z * np_bc.
pub fn reference_flow(
    f_bc: &DVector<f64>,
    ptdf_z: &DMatrix<f64>,
    np_bc: &DVector<f64>,
) -> DVector<f64> {
    f_bc - ptdf_z * np_bc
}

/// Remaining available margin with the minRAM floor:
/// RAM_j = max(minram * cap_j, cap_j - (FRM_j + FAV_j) - f_ref_j).
pub fn compute_ram(
    cnecs: &CnecSet,
    frm: &DVector<f64>,
    fav: &DVector<f64>,
    f_ref: &DVector<f64>,
    minram: f64,
) -> DVector<f64> {
    DVector::from_fn(cnecs.len(), |j, _| {
        let cap = cnecs.entries()[j].capacity;
        (minram * cap).max(cap - (frm[j] + fav[j]) - f_ref[j])
    })
}

/// Margin against the reverse flow direction; the f_ref sign flips.
pub fn compute_ram_reverse(
    cnecs: &CnecSet,
    frm: &DVector<f64>,
    fav: &DVector<f64>,
    f_ref: &DVector<f64>,
    minram: f64,
) -> DVector<f64> {
    DVector::from_fn(cnecs.len(), |j, _| {
        let cap = cnecs.entries()[j].capacity;
        (minram * cap).max(cap - (frm[j] + fav[j]) + f_ref[j])
    })
}

/// Build flow-based parameters for every timestep of a basecase dispatch.
/// `frm` is one vector per timestep (defaults to zero: deterministic runs
/// carry no reliability margin); `fav` is a static per-CNEC column.
pub fn build_fb_parameters(
    case: &GridCase,
    fleet: &GeneratorFleet,
    cnecs: CnecSet,
    basecase: &DispatchResult,
    minram: f64,
    frm: Option<&[DVector<f64>]>,
    fav: Option<&DVector<f64>>,
) -> Result<FbParameters> {
    if !(0.0..=1.0).contains(&minram) {
        return Err(Error::Config(format!("minram fraction must lie in [0,1], got {minram}")));
    }
    let n_t = basecase.timesteps.len();
    let n_j = cnecs.len();
    if let Some(frm) = frm {
        if frm.len() != n_t {
            return Err(Error::Config(format!(
                "FRM series covers {} timesteps, basecase has {n_t}",
                frm.len()
            )));
        }
        for (t, f) in frm.iter().enumerate() {
            if f.len() != n_j {
                return Err(Error::Config(format!(
                    "FRM vector at timestep {t} has {} entries, expected {n_j}",
                    f.len()
                )));
            }
            if f.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Config(format!("FRM at timestep {t} must be finite and >= 0")));
            }
        }
    }
    let fav = match fav {
        Some(v) => {
            if v.len() != n_j {
                return Err(Error::Config(format!(
                    "FAV vector has {} entries, expected {n_j}",
                    v.len()
                )));
            }
            v.clone()
        }
        None => DVector::zeros(n_j),
    };

    let effective = cnecs.effective_ptdf();
    let mut timesteps = Vec::with_capacity(n_t);
    let mut installed_fallbacks = vec![0usize; case.n_zones()];
    let mut uniform_fallbacks = vec![0usize; case.n_zones()];
    for t in 0..n_t {
        let gsk = gsk_pro_rata(case, fleet, basecase, t);
        for (z, fb) in gsk.fallbacks.iter().enumerate() {
            match fb {
                Some(GskFallback::InstalledCapacity) => installed_fallbacks[z] += 1,
                Some(GskFallback::Uniform) => uniform_fallbacks[z] += 1,
                None => {}
            }
        }
        let ptdf_z = &effective * &gsk.matrix;
        let f_bc = &effective * &basecase.timesteps[t].injections;
        let f_ref = reference_flow(&f_bc, &ptdf_z, &basecase.timesteps[t].net_positions);
        let frm_t = match frm {
            Some(f) => f[t].clone(),
            None => DVector::zeros(n_j),
        };
        let ram = compute_ram(&cnecs, &frm_t, &fav, &f_ref, minram);
        let ram_reverse = compute_ram_reverse(&cnecs, &frm_t, &fav, &f_ref, minram);
        timesteps.push(FbTimestep {
            ptdf_z,
            ram,
            ram_reverse,
            f_ref,
            frm: frm_t,
            fav: fav.clone(),
        });
    }
    for (z, zone) in case.zones().iter().enumerate() {
        if installed_fallbacks[z] > 0 {
            log::warn!(
                "zone {zone}: no dispatchable unit online in {} of {n_t} timesteps, \
                 used installed-capacity GSK weights there",
                installed_fallbacks[z]
            );
        }
        if uniform_fallbacks[z] > 0 {
            log::warn!(
                "zone {zone}: no dispatchable capacity, used uniform GSK weights \
                 over its nodes"
            );
        }
    }
    Ok(FbParameters {
        cnecs,
        minram,
        zones: case.zones().to_vec(),
        timesteps,
    })
}

//! Two-dimensional slices of the flow-based domain for plotting.
//!
//! The full domain lives in net-position space; a slice fixes all zones to
//! a base point and moves along two exchange directions. Each CNEC row
//! restricts to a halfplane in the (x, y) plane and the feasible region is
//! their intersection, clipped to a bounding box so unbounded slices still
//! render.

use nalgebra::DVector;

use crate::error::{Error, Result};

use super::FbParameters;

/// Vertices and plane coefficients this close to coincident are merged or
/// treated as degenerate.
const GEOM_TOL: f64 = 1e-9;

/// One CNEC constraint restricted to the slice plane: a.0*x + a.1*y <= b.
#[derive(Debug, Clone)]
pub struct Halfplane {
    pub a: (f64, f64),
    pub b: f64,
    /// CNEC label, e.g. "L3" or "L3|L5".
    pub label: String,
}

/// A 2-D slice of the flow-based domain along two exchange axes.
#[derive(Debug, Clone)]
pub struct DomainSlice {
    /// x axis: 1 MW of x shifts net positions by +1 in the first zone and
    /// -1 in the second.
    pub x_axis: (String, String),
    pub y_axis: (String, String),
    /// All non-vacuous CNEC constraints in slice coordinates.
    pub halfplanes: Vec<Halfplane>,
    /// Feasible polygon, counter-clockwise; empty if the slice is
    /// infeasible at the fixed point.
    pub vertices: Vec<(f64, f64)>,
    /// True when the polygon touches the bounding box, i.e. the slice is
    /// unbounded in some direction and was truncated for rendering.
    pub truncated: bool,
    /// Market-clearing point in slice coordinates, if attached.
    pub marker: Option<(f64, f64)>,
}

impl DomainSlice {
    pub fn with_marker(mut self, marker: (f64, f64)) -> Self {
        self.marker = Some(marker);
        self
    }
}

fn resolve_zone(fbp: &FbParameters, name: &str) -> Result<usize> {
    fbp.zones()
        .iter()
        .position(|z| z == name)
        .ok_or_else(|| Error::Config(format!("unknown zone '{name}' in domain-slice axis")))
}

fn clip(polygon: Vec<(f64, f64)>, a: (f64, f64), b: f64) -> Vec<(f64, f64)> {
    let value = |p: (f64, f64)| a.0 * p.0 + a.1 * p.1 - b;
    let mut out = Vec::with_capacity(polygon.len() + 1);
    for i in 0..polygon.len() {
        let cur = polygon[i];
        let prev = polygon[(i + polygon.len() - 1) % polygon.len()];
        let vc = value(cur);
        let vp = value(prev);
        if vc <= GEOM_TOL {
            if vp > GEOM_TOL {
                let s = vp / (vp - vc);
                out.push((prev.0 + s * (cur.0 - prev.0), prev.1 + s * (cur.1 - prev.1)));
            }
            out.push(cur);
        } else if vp <= GEOM_TOL {
            let s = vp / (vp - vc);
            out.push((prev.0 + s * (cur.0 - prev.0), prev.1 + s * (cur.1 - prev.1)));
        }
    }
    out
}

fn dedup_ring(mut ring: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    ring.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-7 && (a.1 - b.1).abs() < 1e-7);
    if ring.len() > 1 {
        let (first, last) = (ring[0], ring[ring.len() - 1]);
        if (first.0 - last.0).abs() < 1e-7 && (first.1 - last.1).abs() < 1e-7 {
            ring.pop();
        }
    }
    if ring.len() < 3 {
        ring.clear();
    }
    ring
}

/// Slice the flow-based domain of timestep `t` along two exchange axes.
/// `fixed_np` provides the base net position of every zone (axis zones
/// included; their entries act as offsets). `bounding_box` is the half
/// width of the clip window in MW.
pub fn fb_domain_slice(
    fbp: &FbParameters,
    t: usize,
    x_axis: (&str, &str),
    y_axis: (&str, &str),
    fixed_np: &DVector<f64>,
    bounding_box: f64,
) -> Result<DomainSlice> {
    if t >= fbp.n_timesteps() {
        return Err(Error::Config(format!(
            "domain-slice timestep {t} out of range (horizon has {})",
            fbp.n_timesteps()
        )));
    }
    if x_axis.0 == x_axis.1 || y_axis.0 == y_axis.1 {
        return Err(Error::Config("each axis must name two different zones".into()));
    }
    if x_axis == y_axis || x_axis == (y_axis.1, y_axis.0) {
        // a reversed pair spans the same exchange direction: not a 2D slice
        return Err(Error::Config("the two axis zone-pairs must be distinct".into()));
    }
    if fixed_np.len() != fbp.zones().len() {
        return Err(Error::Config(format!(
            "fixed net-position vector has {} entries, expected {}",
            fixed_np.len(),
            fbp.zones().len()
        )));
    }
    if !(bounding_box > 0.0) {
        return Err(Error::Config("bounding box must be positive".into()));
    }
    let xa = resolve_zone(fbp, x_axis.0)?;
    let xb = resolve_zone(fbp, x_axis.1)?;
    let ya = resolve_zone(fbp, y_axis.0)?;
    let yb = resolve_zone(fbp, y_axis.1)?;

    let fb = fbp.timestep(t);
    let mut halfplanes = Vec::new();
    let mut infeasible = false;
    for (j, cnec) in fbp.cnecs().entries().iter().enumerate() {
        let row = fb.ptdf_z.row(j);
        let ax = row[xa] - row[xb];
        let ay = row[ya] - row[yb];
        let b = fb.ram[j] - row.transpose().dot(fixed_np);
        if ax.abs() < GEOM_TOL && ay.abs() < GEOM_TOL {
            // constant over the slice: either vacuous or a proof of
            // infeasibility at the fixed point
            if b < -GEOM_TOL {
                infeasible = true;
            }
            continue;
        }
        halfplanes.push(Halfplane {
            a: (ax, ay),
            b,
            label: cnec.label(),
        });
    }

    let mut vertices = Vec::new();
    if !infeasible {
        let bb = bounding_box;
        let mut ring = vec![(-bb, -bb), (bb, -bb), (bb, bb), (-bb, bb)];
        for hp in &halfplanes {
            ring = clip(ring, hp.a, hp.b);
            if ring.is_empty() {
                break;
            }
        }
        vertices = dedup_ring(ring);
    }
    let truncated = vertices
        .iter()
        .any(|&(x, y)| x.abs() >= bounding_box - 1e-6 || y.abs() >= bounding_box - 1e-6);

    Ok(DomainSlice {
        x_axis: (x_axis.0.to_string(), x_axis.1.to_string()),
        y_axis: (y_axis.0.to_string(), y_axis.1.to_string()),
        halfplanes,
        vertices,
        truncated,
        marker: None,
    })
}

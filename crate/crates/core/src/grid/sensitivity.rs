//! DC sensitivity matrices: PTDF from the reduced nodal susceptance matrix
//! and LODF from PTDF columns. All flows are linear in net injections under
//! the DC approximation, which is what makes the flow-based domain a
//! polyhedron.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::GridCase;

/// Outage distribution factors below this distance from the pole are
/// treated as bridges (outage would split the network).
const BRIDGE_TOL: f64 = 1e-8;

/// Power transfer distribution factors, lines x nodes. Column `slack` is
/// identically zero: injections are balanced at the slack node.
#[derive(Debug, Clone)]
pub struct PtdfMatrix {
    matrix: DMatrix<f64>,
    slack: usize,
}

impl PtdfMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    /// Line flows for a nodal net-injection vector. The injection need not
    /// sum to zero; any imbalance is absorbed at the slack node.
    pub fn flows(&self, injections: &DVector<f64>) -> DVector<f64> {
        &self.matrix * injections
    }

    /// One monitored-line row as a row vector.
    pub fn row(&self, line: usize) -> DVector<f64> {
        self.matrix.row(line).transpose()
    }
}

/// Line outage distribution factors, monitored lines x outaged lines.
/// `LODF[j][k]` is the fraction of the pre-outage flow of line `k` that
/// shifts onto line `j` when `k` trips. Column `k` is valid only when line
/// `k` is not a bridge.
#[derive(Debug, Clone)]
pub struct LodfMatrix {
    matrix: DMatrix<f64>,
    bridge: Vec<bool>,
}

impl LodfMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// True when outaging line `k` would disconnect the network. Bridge
    /// columns are zeroed and must not be used as contingencies.
    pub fn is_bridge(&self, k: usize) -> bool {
        self.bridge[k]
    }
}

/// Build the PTDF matrix of a case from the DC susceptance matrix
/// `B = A^T diag(1/x) A`, inverting the slack-reduced block.
pub fn build_ptdf(case: &GridCase) -> Result<PtdfMatrix> {
    let n = case.n_nodes();
    let m = case.n_lines();
    let slack = case.slack();

    // H = diag(1/x) A maps angles to flows; B = A^T H.
    let mut h = DMatrix::zeros(m, n);
    for (j, line) in case.lines().iter().enumerate() {
        let b = 1.0 / line.reactance;
        h[(j, line.from)] = b;
        h[(j, line.to)] = -b;
    }
    let mut bmat = DMatrix::zeros(n, n);
    for line in case.lines() {
        let b = 1.0 / line.reactance;
        bmat[(line.from, line.from)] += b;
        bmat[(line.to, line.to)] += b;
        bmat[(line.from, line.to)] -= b;
        bmat[(line.to, line.from)] -= b;
    }

    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mut b_red = DMatrix::zeros(n - 1, n - 1);
    for (ri, &i) in keep.iter().enumerate() {
        for (rj, &j) in keep.iter().enumerate() {
            b_red[(ri, rj)] = bmat[(i, j)];
        }
    }
    let mut h_red_t = DMatrix::zeros(n - 1, m);
    for (ri, &i) in keep.iter().enumerate() {
        for j in 0..m {
            h_red_t[(ri, j)] = h[(j, i)];
        }
    }

    // B is symmetric, so PTDF_red^T solves B_red Y = H_red^T.
    let lu = b_red.lu();
    let y = lu
        .solve(&h_red_t)
        .ok_or_else(|| Error::InvalidCase("susceptance matrix is singular".into()))?;

    let mut ptdf = DMatrix::zeros(m, n);
    for (ri, &i) in keep.iter().enumerate() {
        for j in 0..m {
            ptdf[(j, i)] = y[(ri, j)];
        }
    }
    Ok(PtdfMatrix { matrix: ptdf, slack })
}

/// Build the LODF matrix from a PTDF matrix. The diagonal is set to -1 so
/// that the post-outage flow of the outaged line itself is zero.
pub fn build_lodf(case: &GridCase, ptdf: &PtdfMatrix) -> Result<LodfMatrix> {
    let m = case.n_lines();
    // phi[:,k] = PTDF (e_from(k) - e_to(k)): flow response to a unit
    // injection shifted across line k.
    let mut phi = DMatrix::zeros(m, m);
    for (k, line) in case.lines().iter().enumerate() {
        for j in 0..m {
            phi[(j, k)] = ptdf.matrix()[(j, line.from)] - ptdf.matrix()[(j, line.to)];
        }
    }

    let mut lodf = DMatrix::zeros(m, m);
    let mut bridge = vec![false; m];
    for k in 0..m {
        let denom = 1.0 - phi[(k, k)];
        if denom.abs() < BRIDGE_TOL {
            bridge[k] = true;
            continue;
        }
        for j in 0..m {
            lodf[(j, k)] = phi[(j, k)] / denom;
        }
        lodf[(k, k)] = -1.0;
    }
    Ok(LodfMatrix { matrix: lodf, bridge })
}

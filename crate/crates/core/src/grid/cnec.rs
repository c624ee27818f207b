//! Selection of critical network elements and contingencies. A CNEC is a
//! monitored line, optionally paired with a single-line outage; its flow
//! under the outage is expressed through an effective PTDF row so every
//! downstream stage can treat CNECs as plain linear constraints.

use nalgebra::DVector;

use crate::grid::{GridCase, LodfMatrix, PtdfMatrix};

/// One critical network element with optional contingency.
#[derive(Debug, Clone)]
pub struct Cnec {
    /// Monitored line index.
    pub line: usize,
    pub line_id: String,
    /// Outaged line index; `None` is the intact-network entry.
    pub contingency: Option<usize>,
    pub contingency_id: Option<String>,
    /// Effective nodal PTDF row (base row plus LODF-weighted outage row).
    pub row: DVector<f64>,
    /// Thermal capacity of the monitored line in MW.
    pub capacity: f64,
}

impl Cnec {
    /// Compact label for reports: `L3` or `L3|L5` under outage of L5.
    pub fn label(&self) -> String {
        match &self.contingency_id {
            Some(c) => format!("{}|{}", self.line_id, c),
            None => self.line_id.clone(),
        }
    }
}

/// How the monitored set was screened. Kept alongside the selection so
/// exported parameter files can state the rule that produced them.
#[derive(Debug, Clone)]
pub struct ScreeningInfo {
    pub z2z_threshold: f64,
    pub outage_sensitivity: f64,
    pub cross_border_only: bool,
    /// Nodal participation used to aggregate zones during screening.
    pub participation: String,
    /// Per-line maximum zone-to-zone shift factor magnitude.
    pub max_z2z: Vec<f64>,
}

/// Ordered CNEC list: entries are grouped by monitored line in line-index
/// order, the intact entry first, contingencies in outaged-line order.
#[derive(Debug, Clone)]
pub struct CnecSet {
    entries: Vec<Cnec>,
    screening: ScreeningInfo,
    n_nodes: usize,
}

impl CnecSet {
    pub fn entries(&self) -> &[Cnec] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn screening(&self) -> &ScreeningInfo {
        &self.screening
    }

    /// Capacities f̄ of all entries as a vector.
    pub fn capacities(&self) -> DVector<f64> {
        DVector::from_iterator(self.entries.len(), self.entries.iter().map(|c| c.capacity))
    }

    /// Effective nodal PTDF rows stacked into a CNEC x nodes matrix. The
    /// column count stays correct even when no CNEC was selected.
    pub fn effective_ptdf(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.entries.len(), self.n_nodes, |i, j| self.entries[i].row[j])
    }
}

/// Maximum zone-to-zone shift factor of a line under uniform per-node
/// participation: max over zone pairs of |row · (u_a - u_b)| where u_z
/// spreads 1 MW evenly over the nodes of zone z.
fn max_zone_to_zone(case: &GridCase, ptdf: &PtdfMatrix, line: usize) -> f64 {
    let row = ptdf.matrix().row(line);
    let mut zonal = vec![0.0; case.n_zones()];
    for z in 0..case.n_zones() {
        let members = case.zone_nodes(z);
        zonal[z] = members.iter().map(|&i| row[i]).sum::<f64>() / members.len() as f64;
    }
    let mut best: f64 = 0.0;
    for a in 0..case.n_zones() {
        for b in (a + 1)..case.n_zones() {
            best = best.max((zonal[a] - zonal[b]).abs());
        }
    }
    best
}

/// Select the CNEC set: all cross-border lines, plus (unless
/// `cross_border_only`) internal lines whose maximum zone-to-zone shift
/// factor exceeds `z2z_threshold`; for each selected line, every non-bridge
/// outage of a different line with |LODF| exceeding `outage_sensitivity`
/// becomes a contingency entry.
pub fn select_cnecs(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    lodf: &LodfMatrix,
    z2z_threshold: f64,
    outage_sensitivity: f64,
    cross_border_only: bool,
) -> CnecSet {
    let m = case.n_lines();
    let max_z2z: Vec<f64> = (0..m).map(|j| max_zone_to_zone(case, ptdf, j)).collect();

    let mut entries = Vec::new();
    for j in 0..m {
        let selected = case.is_cross_border(j) || (!cross_border_only && max_z2z[j] > z2z_threshold);
        if !selected {
            continue;
        }
        let line = &case.lines()[j];
        entries.push(Cnec {
            line: j,
            line_id: line.id.clone(),
            contingency: None,
            contingency_id: None,
            row: ptdf.row(j),
            capacity: line.capacity,
        });
        for k in 0..m {
            if k == j || lodf.is_bridge(k) {
                continue;
            }
            let factor = lodf.matrix()[(j, k)];
            if factor.abs() > outage_sensitivity {
                let row = ptdf.row(j) + factor * ptdf.row(k);
                entries.push(Cnec {
                    line: j,
                    line_id: line.id.clone(),
                    contingency: Some(k),
                    contingency_id: Some(case.lines()[k].id.clone()),
                    row,
                    capacity: line.capacity,
                });
            }
        }
    }

    CnecSet {
        entries,
        screening: ScreeningInfo {
            z2z_threshold,
            outage_sensitivity,
            cross_border_only,
            participation: "uniform".into(),
            max_z2z,
        },
        n_nodes: case.n_nodes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_lodf, build_ptdf};

    // Two zones around a 4-node ring: L2 and L4 cross the border, L1 and L3
    // are internal.
    fn two_zone_ring() -> GridCase {
        GridCase::new(
            vec![
                ("n1".into(), "Z1".into()),
                ("n2".into(), "Z1".into()),
                ("n3".into(), "Z2".into()),
                ("n4".into(), "Z2".into()),
            ],
            vec![
                ("L1".into(), "n1".into(), "n2".into(), 0.1, 100.0),
                ("L2".into(), "n2".into(), "n3".into(), 0.1, 100.0),
                ("L3".into(), "n3".into(), "n4".into(), 0.1, 100.0),
                ("L4".into(), "n4".into(), "n1".into(), 0.1, 100.0),
            ],
            "n1",
        )
        .unwrap()
    }

    fn build(case: &GridCase) -> (PtdfMatrix, LodfMatrix) {
        let ptdf = build_ptdf(case).unwrap();
        let lodf = build_lodf(case, &ptdf).unwrap();
        (ptdf, lodf)
    }

    #[test]
    fn cross_border_lines_always_selected() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 1.0, true);
        let base: Vec<&str> = set
            .entries()
            .iter()
            .filter(|c| c.contingency.is_none())
            .map(|c| c.line_id.as_str())
            .collect();
        assert_eq!(base, vec!["L2", "L4"]);
        assert!(set.entries().iter().all(|c| c.contingency.is_none()));
    }

    #[test]
    fn symmetric_internal_lines_carry_no_zonal_transfer() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        // The ring is mirror-symmetric, so a uniform Z1->Z2 transfer splits
        // evenly over the two border lines and leaves the internal lines
        // untouched: their screening statistic is exactly zero and they
        // stay out even at a permissive threshold.
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 1.0, false);
        let base: Vec<&str> = set
            .entries()
            .iter()
            .filter(|c| c.contingency.is_none())
            .map(|c| c.line_id.as_str())
            .collect();
        assert_eq!(base, vec!["L2", "L4"]);
        assert!(set.screening().max_z2z[0].abs() < 1e-12);
        assert!((set.screening().max_z2z[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn internal_lines_join_when_sensitive() {
        // n4 hangs off n3 inside Z2: half the uniform Z1->Z2 withdrawal
        // sits at n4 and must cross L3, so max_z2z[L3] = 0.5 exactly,
        // while L1 carries nothing by the n1/n2 mirror symmetry.
        let case = GridCase::new(
            vec![
                ("n1".into(), "Z1".into()),
                ("n2".into(), "Z1".into()),
                ("n3".into(), "Z2".into()),
                ("n4".into(), "Z2".into()),
            ],
            vec![
                ("L1".into(), "n1".into(), "n2".into(), 0.1, 100.0),
                ("L2".into(), "n2".into(), "n3".into(), 0.1, 100.0),
                ("L3".into(), "n3".into(), "n4".into(), 0.1, 100.0),
                ("L4".into(), "n1".into(), "n3".into(), 0.1, 100.0),
            ],
            "n1",
        )
        .unwrap();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 1.0, false);
        let base: Vec<&str> = set
            .entries()
            .iter()
            .filter(|c| c.contingency.is_none())
            .map(|c| c.line_id.as_str())
            .collect();
        assert_eq!(base, vec!["L2", "L3", "L4"]);
        let l3 = case.line_idx("L3").unwrap();
        assert!((set.screening().max_z2z[l3] - 0.5).abs() < 1e-12);
        // cross_border_only drops it again
        let xb = select_cnecs(&case, &ptdf, &lodf, 0.05, 1.0, true);
        assert!(xb.entries().iter().all(|c| c.line_id != "L3"));
    }

    #[test]
    fn unit_threshold_excludes_all_internal_lines() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 1.0, 1.0, false);
        let base: Vec<&str> = set
            .entries()
            .iter()
            .filter(|c| c.contingency.is_none())
            .map(|c| c.line_id.as_str())
            .collect();
        assert_eq!(base, vec!["L2", "L4"]);
    }

    #[test]
    fn unit_outage_sensitivity_yields_no_contingencies() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 1.0, false);
        assert!(set.entries().iter().all(|c| c.contingency.is_none()));
    }

    #[test]
    fn contingencies_carry_corrected_rows() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 0.2, true);
        let entry = set
            .entries()
            .iter()
            .find(|c| c.line_id == "L2" && c.contingency_id.as_deref() == Some("L4"))
            .expect("ring outage factors are 1 in magnitude, above 0.2");
        let j = case.line_idx("L2").unwrap();
        let k = case.line_idx("L4").unwrap();
        let expect = ptdf.row(j) + lodf.matrix()[(j, k)] * ptdf.row(k);
        assert!((entry.row.clone() - expect).norm() < 1e-12);
        assert_eq!(entry.capacity, 100.0);
        assert_eq!(entry.label(), "L2|L4");
    }

    #[test]
    fn raising_thresholds_never_adds_entries() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let loose = select_cnecs(&case, &ptdf, &lodf, 0.05, 0.2, false);
        for (z2z, outage) in [(0.3, 0.2), (0.05, 0.6), (0.6, 0.9)] {
            let tight = select_cnecs(&case, &ptdf, &lodf, z2z, outage, false);
            assert!(tight.len() <= loose.len());
            for c in tight.entries() {
                assert!(loose
                    .entries()
                    .iter()
                    .any(|l| l.line == c.line && l.contingency == c.contingency));
            }
        }
    }

    #[test]
    fn no_duplicate_pairs_and_no_self_contingency() {
        let case = two_zone_ring();
        let (ptdf, lodf) = build(&case);
        let set = select_cnecs(&case, &ptdf, &lodf, 0.05, 0.2, false);
        let mut seen = std::collections::HashSet::new();
        for c in set.entries() {
            assert!(seen.insert((c.line, c.contingency)));
            assert_ne!(Some(c.line), c.contingency);
        }
    }
}

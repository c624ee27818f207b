//! Physical network model: nodes, lines, zones, generator fleet and
//! timeseries, plus the DC sensitivity machinery (PTDF/LODF) and the
//! selection of critical network elements.

mod cnec;
mod io;
mod sensitivity;

pub use cnec::{select_cnecs, Cnec, CnecSet, ScreeningInfo};
pub use io::load_grid_data;
pub use sensitivity::{build_lodf, build_ptdf, LodfMatrix, PtdfMatrix};

use std::collections::HashMap;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// One network node, assigned to exactly one zone.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    /// Index into [`GridCase::zones`].
    pub zone: usize,
}

/// One transmission line between two nodes.
#[derive(Debug, Clone)]
pub struct Line {
    pub id: String,
    /// Node indices; flow is positive from `from` to `to`.
    pub from: usize,
    pub to: usize,
    /// Series reactance in per-unit on a common base, strictly positive.
    pub reactance: f64,
    /// Thermal capacity in MW, strictly positive.
    pub capacity: f64,
}

/// The physical transmission network: nodes grouped into zones, lines with
/// reactances and capacities, and a slack node for the DC formulation.
#[derive(Debug, Clone)]
pub struct GridCase {
    nodes: Vec<Node>,
    lines: Vec<Line>,
    /// Zone ids in first-appearance order; the index defines the zone axis
    /// of every zonal vector and matrix in the crate.
    zones: Vec<String>,
    slack: usize,
    node_index: HashMap<String, usize>,
    line_index: HashMap<String, usize>,
}

impl GridCase {
    /// Build and validate a case. `nodes` are `(node_id, zone_id)` pairs,
    /// `lines` are `(line_id, from_id, to_id, reactance, capacity)`.
    pub fn new(
        nodes: Vec<(String, String)>,
        lines: Vec<(String, String, String, f64, f64)>,
        slack_id: &str,
    ) -> Result<Self> {
        let mut zones: Vec<String> = Vec::new();
        let mut node_index = HashMap::new();
        let mut node_vec = Vec::with_capacity(nodes.len());
        for (id, zone_id) in nodes {
            if node_index.contains_key(&id) {
                return Err(Error::InvalidCase(format!("duplicate node id {id:?}")));
            }
            let zone = match zones.iter().position(|z| *z == zone_id) {
                Some(z) => z,
                None => {
                    zones.push(zone_id.clone());
                    zones.len() - 1
                }
            };
            node_index.insert(id.clone(), node_vec.len());
            node_vec.push(Node { id, zone });
        }
        if node_vec.is_empty() {
            return Err(Error::InvalidCase("case has no nodes".into()));
        }

        let mut line_index = HashMap::new();
        let mut line_vec = Vec::with_capacity(lines.len());
        for (id, from_id, to_id, reactance, capacity) in lines {
            if line_index.contains_key(&id) {
                return Err(Error::InvalidCase(format!("duplicate line id {id:?}")));
            }
            let from = *node_index
                .get(&from_id)
                .ok_or_else(|| Error::InvalidCase(format!("line {id}: unknown node {from_id:?}")))?;
            let to = *node_index
                .get(&to_id)
                .ok_or_else(|| Error::InvalidCase(format!("line {id}: unknown node {to_id:?}")))?;
            if from == to {
                return Err(Error::InvalidCase(format!("line {id}: both endpoints are {from_id:?}")));
            }
            if !(reactance > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "line {id}: reactance must be strictly positive, got {reactance}"
                )));
            }
            if !(capacity > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "line {id}: capacity must be strictly positive, got {capacity}"
                )));
            }
            line_index.insert(id.clone(), line_vec.len());
            line_vec.push(Line {
                id,
                from,
                to,
                reactance,
                capacity,
            });
        }

        let slack = *node_index
            .get(slack_id)
            .ok_or_else(|| Error::InvalidCase(format!("slack node {slack_id:?} not in node list")))?;

        let case = GridCase {
            nodes: node_vec,
            lines: line_vec,
            zones,
            slack,
            node_index,
            line_index,
        };
        if !case.is_connected() {
            return Err(Error::InvalidCase("network graph is not connected".into()));
        }
        Ok(case)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn node_idx(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn line_idx(&self, id: &str) -> Option<usize> {
        self.line_index.get(id).copied()
    }

    pub fn zone_idx(&self, id: &str) -> Option<usize> {
        self.zones.iter().position(|z| z == id)
    }

    /// Zone index of each node.
    pub fn node_zones(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.zone).collect()
    }

    /// Node indices belonging to zone `z`.
    pub fn zone_nodes(&self, z: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| (n.zone == z).then_some(i))
            .collect()
    }

    /// A line is cross-border when its endpoints lie in different zones.
    pub fn is_cross_border(&self, line: usize) -> bool {
        let l = &self.lines[line];
        self.nodes[l.from].zone != self.nodes[l.to].zone
    }

    /// Line capacities as a vector, in line order.
    pub fn capacities(&self) -> DVector<f64> {
        DVector::from_iterator(self.lines.len(), self.lines.iter().map(|l| l.capacity))
    }

    /// Returns a copy of the case with every line capacity multiplied by
    /// `factor`. Used to tighten or relax the network in scenario sweeps.
    pub fn scale_capacities(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::Config(format!(
                "line capacity scale factor must be > 0, got {factor}"
            )));
        }
        let mut scaled = self.clone();
        for line in &mut scaled.lines {
            line.capacity *= factor;
        }
        Ok(scaled)
    }

    fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.nodes.len()
    }
}

/// Generator technology class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Dispatchable,
    Intermittent,
}

/// One generator attached to a node.
#[derive(Debug, Clone)]
pub struct Generator {
    pub id: String,
    pub node: usize,
    pub kind: GeneratorKind,
    /// Upper generation limit in MW.
    pub capacity: f64,
    /// Marginal cost in $/MWh; zero for intermittent units.
    pub marginal_cost: f64,
}

/// The generator fleet. Dispatchable units carry a marginal cost and are
/// scheduled by the dispatch stages; intermittent units inject their
/// available infeed minus curtailment.
#[derive(Debug, Clone)]
pub struct GeneratorFleet {
    generators: Vec<Generator>,
    dispatchable: Vec<usize>,
    intermittent: Vec<usize>,
    gen_index: HashMap<String, usize>,
}

impl GeneratorFleet {
    pub fn new(case: &GridCase, generators: Vec<(String, String, GeneratorKind, f64, f64)>) -> Result<Self> {
        let mut gen_index = HashMap::new();
        let mut gen_vec = Vec::with_capacity(generators.len());
        for (id, node_id, kind, capacity, marginal_cost) in generators {
            if gen_index.contains_key(&id) {
                return Err(Error::InvalidCase(format!("duplicate generator id {id:?}")));
            }
            let node = case
                .node_idx(&node_id)
                .ok_or_else(|| Error::InvalidCase(format!("generator {id}: unknown node {node_id:?}")))?;
            if capacity < 0.0 {
                return Err(Error::InvalidCase(format!(
                    "generator {id}: capacity must be non-negative, got {capacity}"
                )));
            }
            if kind == GeneratorKind::Intermittent && marginal_cost != 0.0 {
                return Err(Error::InvalidCase(format!(
                    "generator {id}: intermittent units must have zero marginal cost, got {marginal_cost}"
                )));
            }
            gen_index.insert(id.clone(), gen_vec.len());
            gen_vec.push(Generator {
                id,
                node,
                kind,
                capacity,
                marginal_cost,
            });
        }
        let dispatchable = gen_vec
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (g.kind == GeneratorKind::Dispatchable).then_some(i))
            .collect();
        let intermittent = gen_vec
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (g.kind == GeneratorKind::Intermittent).then_some(i))
            .collect();
        Ok(GeneratorFleet {
            generators: gen_vec,
            dispatchable,
            intermittent,
            gen_index,
        })
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    /// Indices of dispatchable units, in fleet order.
    pub fn dispatchable(&self) -> &[usize] {
        &self.dispatchable
    }

    /// Indices of intermittent units, in fleet order.
    pub fn intermittent(&self) -> &[usize] {
        &self.intermittent
    }

    pub fn gen_idx(&self, id: &str) -> Option<usize> {
        self.gen_index.get(id).copied()
    }

    /// Position of generator `g` within the intermittent ordering, if any.
    pub fn intermittent_pos(&self, g: usize) -> Option<usize> {
        self.intermittent.iter().position(|&i| i == g)
    }
}

/// Per-timestep nodal demand and intermittent availability over the model
/// horizon. Timestep labels are sorted lexicographically; zero-padded labels
/// are recommended so lexicographic and chronological order coincide.
#[derive(Debug, Clone)]
pub struct SeriesData {
    timesteps: Vec<String>,
    /// `demand[t][node]` in MW.
    demand: Vec<DVector<f64>>,
    /// `availability[t][r]` in MW, indexed by position in
    /// [`GeneratorFleet::intermittent`].
    availability: Vec<DVector<f64>>,
}

impl SeriesData {
    pub fn new(
        case: &GridCase,
        fleet: &GeneratorFleet,
        timesteps: Vec<String>,
        demand: Vec<DVector<f64>>,
        availability: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if demand.len() != timesteps.len() || availability.len() != timesteps.len() {
            return Err(Error::InvalidCase(
                "demand/availability length does not match horizon".into(),
            ));
        }
        for (t, label) in timesteps.iter().enumerate() {
            if demand[t].len() != case.n_nodes() {
                return Err(Error::InvalidCase(format!(
                    "demand at {label} has {} entries, expected {}",
                    demand[t].len(),
                    case.n_nodes()
                )));
            }
            if availability[t].len() != fleet.intermittent().len() {
                return Err(Error::InvalidCase(format!(
                    "availability at {label} has {} entries, expected {}",
                    availability[t].len(),
                    fleet.intermittent().len()
                )));
            }
            if let Some(i) = demand[t].iter().position(|&d| d < 0.0) {
                return Err(Error::InvalidCase(format!(
                    "negative demand at {label}, node {}",
                    case.nodes()[i].id
                )));
            }
            for (r, &g) in fleet.intermittent().iter().enumerate() {
                let a = availability[t][r];
                let cap = fleet.generators()[g].capacity;
                if a < 0.0 || a > cap + 1e-9 {
                    return Err(Error::InvalidCase(format!(
                        "availability at {label} for {} is {a} MW, outside [0, {cap}]",
                        fleet.generators()[g].id
                    )));
                }
            }
        }
        Ok(SeriesData {
            timesteps,
            demand,
            availability,
        })
    }

    pub fn timesteps(&self) -> &[String] {
        &self.timesteps
    }

    pub fn n_timesteps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn demand(&self, t: usize) -> &DVector<f64> {
        &self.demand[t]
    }

    pub fn availability(&self, t: usize) -> &DVector<f64> {
        &self.availability[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring3() -> GridCase {
        GridCase::new(
            vec![
                ("n1".into(), "Z1".into()),
                ("n2".into(), "Z1".into()),
                ("n3".into(), "Z2".into()),
            ],
            vec![
                ("L1".into(), "n1".into(), "n2".into(), 0.1, 100.0),
                ("L2".into(), "n2".into(), "n3".into(), 0.1, 100.0),
                ("L3".into(), "n3".into(), "n1".into(), 0.1, 100.0),
            ],
            "n1",
        )
        .unwrap()
    }

    #[test]
    fn zone_partition_and_lookup() {
        let case = ring3();
        assert_eq!(case.n_zones(), 2);
        assert_eq!(case.zone_nodes(0), vec![0, 1]);
        assert_eq!(case.zone_nodes(1), vec![2]);
        assert!(case.is_cross_border(case.line_idx("L2").unwrap()));
        assert!(!case.is_cross_border(case.line_idx("L1").unwrap()));
    }

    #[test]
    fn rejects_disconnected_graph() {
        let err = GridCase::new(
            vec![
                ("a".into(), "Z1".into()),
                ("b".into(), "Z1".into()),
                ("c".into(), "Z2".into()),
            ],
            vec![("L1".into(), "a".into(), "b".into(), 0.1, 10.0)],
            "a",
        )
        .unwrap_err();
        assert!(err.to_string().contains("not connected"));
    }

    #[test]
    fn rejects_non_positive_reactance() {
        let err = GridCase::new(
            vec![("a".into(), "Z1".into()), ("b".into(), "Z1".into())],
            vec![("L1".into(), "a".into(), "b".into(), 0.0, 10.0)],
            "a",
        )
        .unwrap_err();
        assert!(err.to_string().contains("reactance"));
    }

    #[test]
    fn rejects_unknown_slack() {
        let err = GridCase::new(
            vec![("a".into(), "Z1".into()), ("b".into(), "Z1".into())],
            vec![("L1".into(), "a".into(), "b".into(), 0.1, 10.0)],
            "zz",
        )
        .unwrap_err();
        assert!(err.to_string().contains("slack"));
    }

    #[test]
    fn intermittent_cost_must_be_zero() {
        let case = ring3();
        let err = GeneratorFleet::new(
            &case,
            vec![("w1".into(), "n1".into(), GeneratorKind::Intermittent, 50.0, 3.0)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("zero marginal cost"));
    }

    #[test]
    fn availability_bounded_by_capacity() {
        let case = ring3();
        let fleet = GeneratorFleet::new(
            &case,
            vec![("w1".into(), "n1".into(), GeneratorKind::Intermittent, 50.0, 0.0)],
        )
        .unwrap();
        let err = SeriesData::new(
            &case,
            &fleet,
            vec!["t01".into()],
            vec![DVector::zeros(3)],
            vec![DVector::from_element(1, 60.0)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("outside"));
    }
}

//! Dataset ingestion: a directory of five CSV files describing the network,
//! the fleet and the timeseries. Every ingestion error names the file and,
//! where a single row is at fault, its 1-based line number.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::{GeneratorFleet, GeneratorKind, GridCase, SeriesData};

const NODES: &str = "nodes.csv";
const LINES: &str = "lines.csv";
const GENERATORS: &str = "generators.csv";
const DEMAND: &str = "demand.csv";
const AVAILABILITY: &str = "availability.csv";

/// Load and validate a dataset directory containing `nodes.csv`,
/// `lines.csv`, `generators.csv`, `demand.csv` and `availability.csv`.
pub fn load_grid_data(dir: &Path) -> Result<(GridCase, GeneratorFleet, SeriesData)> {
    let nodes = read_nodes(dir)?;
    let node_ids: BTreeSet<&str> = nodes.rows.iter().map(|(id, _)| id.as_str()).collect();
    let lines = read_lines(dir, &node_ids)?;
    let case = GridCase::new(nodes.rows, lines, &nodes.slack)?;
    let generators = read_generators(dir, &case)?;
    let fleet = GeneratorFleet::new(&case, generators)?;
    let series = read_series(dir, &case, &fleet)?;
    Ok((case, fleet, series))
}

struct NodeTable {
    rows: Vec<(String, String)>,
    slack: String,
}

fn read_nodes(dir: &Path) -> Result<NodeTable> {
    let mut rdr = open(dir, NODES)?;
    let cols = columns(NODES, &mut rdr, &["node_id", "zone_id", "slack"])?;
    let mut rows = Vec::new();
    let mut slack: Option<String> = None;
    for rec in rdr.records() {
        let (rec, row) = record(NODES, rec)?;
        let id = field(&rec, cols[0]);
        let zone = field(&rec, cols[1]);
        if id.is_empty() || zone.is_empty() {
            return Err(Error::ingest(NODES, Some(row), "empty node_id or zone_id"));
        }
        match field(&rec, cols[2]) {
            "0" => {}
            "1" => {
                if let Some(prev) = &slack {
                    return Err(Error::ingest(
                        NODES,
                        Some(row),
                        format!("second slack node {id} (slack already set to {prev})"),
                    ));
                }
                slack = Some(id.to_string());
            }
            other => {
                return Err(Error::ingest(
                    NODES,
                    Some(row),
                    format!("slack flag must be 0 or 1, got {other:?}"),
                ))
            }
        }
        rows.push((id.to_string(), zone.to_string()));
    }
    let slack = slack.ok_or_else(|| Error::ingest(NODES, None, "no node has slack = 1"))?;
    Ok(NodeTable { rows, slack })
}

fn read_lines(dir: &Path, node_ids: &BTreeSet<&str>) -> Result<Vec<(String, String, String, f64, f64)>> {
    let mut rdr = open(dir, LINES)?;
    let cols = columns(
        LINES,
        &mut rdr,
        &["line_id", "from", "to", "reactance_pu", "capacity_mw"],
    )?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let (rec, row) = record(LINES, rec)?;
        let id = field(&rec, cols[0]).to_string();
        let from = field(&rec, cols[1]).to_string();
        let to = field(&rec, cols[2]).to_string();
        for end in [&from, &to] {
            if !node_ids.contains(end.as_str()) {
                return Err(Error::ingest(LINES, Some(row), format!("unknown node {end:?}")));
            }
        }
        let x = number(LINES, row, "reactance_pu", field(&rec, cols[3]))?;
        let cap = number(LINES, row, "capacity_mw", field(&rec, cols[4]))?;
        if x <= 0.0 {
            return Err(Error::ingest(
                LINES,
                Some(row),
                format!("reactance_pu must be > 0, got {x}"),
            ));
        }
        if cap <= 0.0 {
            return Err(Error::ingest(
                LINES,
                Some(row),
                format!("capacity_mw must be > 0, got {cap}"),
            ));
        }
        out.push((id, from, to, x, cap));
    }
    Ok(out)
}

fn read_generators(dir: &Path, case: &GridCase) -> Result<Vec<(String, String, GeneratorKind, f64, f64)>> {
    let mut rdr = open(dir, GENERATORS)?;
    let cols = columns(
        GENERATORS,
        &mut rdr,
        &["gen_id", "node_id", "kind", "capacity_mw", "cost_per_mwh"],
    )?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let (rec, row) = record(GENERATORS, rec)?;
        let id = field(&rec, cols[0]).to_string();
        let node = field(&rec, cols[1]).to_string();
        if case.node_idx(&node).is_none() {
            return Err(Error::ingest(GENERATORS, Some(row), format!("unknown node {node:?}")));
        }
        let kind = match field(&rec, cols[2]) {
            "dispatchable" => GeneratorKind::Dispatchable,
            "intermittent" => GeneratorKind::Intermittent,
            other => {
                return Err(Error::ingest(
                    GENERATORS,
                    Some(row),
                    format!("kind must be dispatchable or intermittent, got {other:?}"),
                ))
            }
        };
        let cap = number(GENERATORS, row, "capacity_mw", field(&rec, cols[3]))?;
        let cost = number(GENERATORS, row, "cost_per_mwh", field(&rec, cols[4]))?;
        if cap < 0.0 {
            return Err(Error::ingest(
                GENERATORS,
                Some(row),
                format!("capacity_mw must be >= 0, got {cap}"),
            ));
        }
        if kind == GeneratorKind::Intermittent && cost != 0.0 {
            return Err(Error::ingest(
                GENERATORS,
                Some(row),
                format!("intermittent unit {id} must have cost_per_mwh = 0, got {cost}"),
            ));
        }
        out.push((id, node, kind, cap, cost));
    }
    Ok(out)
}

fn read_series(dir: &Path, case: &GridCase, fleet: &GeneratorFleet) -> Result<SeriesData> {
    // timestep -> node index -> MW
    let mut demand: BTreeMap<String, HashMap<usize, f64>> = BTreeMap::new();
    {
        let mut rdr = open(dir, DEMAND)?;
        let cols = columns(DEMAND, &mut rdr, &["timestep", "node_id", "mw"])?;
        for rec in rdr.records() {
            let (rec, row) = record(DEMAND, rec)?;
            let t = field(&rec, cols[0]).to_string();
            if t.is_empty() {
                return Err(Error::ingest(DEMAND, Some(row), "empty timestep label"));
            }
            let node_id = field(&rec, cols[1]);
            let node = case
                .node_idx(node_id)
                .ok_or_else(|| Error::ingest(DEMAND, Some(row), format!("unknown node {node_id:?}")))?;
            let mw = number(DEMAND, row, "mw", field(&rec, cols[2]))?;
            if mw < 0.0 {
                return Err(Error::ingest(DEMAND, Some(row), format!("demand must be >= 0, got {mw}")));
            }
            if demand.entry(t.clone()).or_default().insert(node, mw).is_some() {
                return Err(Error::ingest(
                    DEMAND,
                    Some(row),
                    format!("duplicate demand row for timestep {t}, node {node_id}"),
                ));
            }
        }
    }
    if demand.is_empty() {
        return Err(Error::ingest(DEMAND, None, "no demand rows: horizon is empty"));
    }

    // timestep -> intermittent position -> MW
    let mut avail: BTreeMap<String, HashMap<usize, f64>> = BTreeMap::new();
    {
        let mut rdr = open(dir, AVAILABILITY)?;
        let cols = columns(AVAILABILITY, &mut rdr, &["timestep", "gen_id", "mw"])?;
        for rec in rdr.records() {
            let (rec, row) = record(AVAILABILITY, rec)?;
            let t = field(&rec, cols[0]).to_string();
            let gen_id = field(&rec, cols[1]);
            let g = fleet
                .gen_idx(gen_id)
                .ok_or_else(|| Error::ingest(AVAILABILITY, Some(row), format!("unknown generator {gen_id:?}")))?;
            let r = fleet.intermittent_pos(g).ok_or_else(|| {
                Error::ingest(
                    AVAILABILITY,
                    Some(row),
                    format!("generator {gen_id} is dispatchable; availability applies to intermittent units"),
                )
            })?;
            if !demand.contains_key(&t) {
                return Err(Error::ingest(
                    AVAILABILITY,
                    Some(row),
                    format!("timestep {t} does not appear in {DEMAND}"),
                ));
            }
            let mw = number(AVAILABILITY, row, "mw", field(&rec, cols[2]))?;
            let cap = fleet.generators()[g].capacity;
            if mw < 0.0 || mw > cap + 1e-9 {
                return Err(Error::ingest(
                    AVAILABILITY,
                    Some(row),
                    format!("availability {mw} MW outside [0, {cap}] for {gen_id}"),
                ));
            }
            if avail.entry(t.clone()).or_default().insert(r, mw).is_some() {
                return Err(Error::ingest(
                    AVAILABILITY,
                    Some(row),
                    format!("duplicate availability row for timestep {t}, generator {gen_id}"),
                ));
            }
        }
    }

    // BTreeMap iteration gives the lexicographic horizon order.
    let timesteps: Vec<String> = demand.keys().cloned().collect();
    let mut demand_vecs = Vec::with_capacity(timesteps.len());
    let mut avail_vecs = Vec::with_capacity(timesteps.len());
    for t in &timesteps {
        let by_node = &demand[t];
        let mut d = DVector::zeros(case.n_nodes());
        for i in 0..case.n_nodes() {
            match by_node.get(&i) {
                Some(&mw) => d[i] = mw,
                None => {
                    return Err(Error::ingest(
                        DEMAND,
                        None,
                        format!("timestep {t} has no row for node {}", case.nodes()[i].id),
                    ))
                }
            }
        }
        demand_vecs.push(d);

        let by_gen = avail.get(t);
        let mut a = DVector::zeros(fleet.intermittent().len());
        for (r, &g) in fleet.intermittent().iter().enumerate() {
            match by_gen.and_then(|m| m.get(&r)) {
                Some(&mw) => a[r] = mw,
                None => {
                    return Err(Error::ingest(
                        AVAILABILITY,
                        None,
                        format!("timestep {t} has no row for generator {}", fleet.generators()[g].id),
                    ))
                }
            }
        }
        avail_vecs.push(a);
    }

    SeriesData::new(case, fleet, timesteps, demand_vecs, avail_vecs)
}

fn open(dir: &Path, name: &str) -> Result<csv::Reader<File>> {
    let path = dir.join(name);
    let file = File::open(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ingest(name, None, "file not found")
        } else {
            Error::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Resolve the required column names to indices; extra columns are ignored.
fn columns(name: &str, rdr: &mut csv::Reader<File>, required: &[&str]) -> Result<Vec<usize>> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::ingest(name, Some(1), format!("cannot read header: {e}")))?;
    required
        .iter()
        .map(|want| {
            headers
                .iter()
                .position(|h| h == *want)
                .ok_or_else(|| Error::ingest(name, Some(1), format!("missing column {want:?}")))
        })
        .collect()
}

fn record(
    name: &str,
    rec: std::result::Result<csv::StringRecord, csv::Error>,
) -> Result<(csv::StringRecord, usize)> {
    let rec = rec.map_err(|e| {
        let row = e.position().map(|p| p.line() as usize);
        Error::ingest(name, row, format!("malformed row: {e}"))
    })?;
    let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
    Ok((rec, row))
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize) -> &'a str {
    rec.get(idx).unwrap_or("")
}

fn number(name: &str, row: usize, col: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::ingest(name, Some(row), format!("{col} is not a number: {raw:?}")))?;
    if !v.is_finite() {
        return Err(Error::ingest(name, Some(row), format!("{col} must be finite, got {raw}")));
    }
    Ok(v)
}

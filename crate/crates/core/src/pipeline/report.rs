//! Report emission: per-run CSV tables, a consolidated summary, a manifest
//! of content hashes, and cross-scenario comparison tables.
//!
//! Everything written here is a pure function of the report contents, so a
//! rerun with the same config and seed reproduces every byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fbmc_params::DomainSlice;
use crate::pipeline::config::hex;
use crate::pipeline::ScenarioReport;

/// Cost decomposition of one stage. `total` is always the sum of the three
/// components; the exchange regularizer is reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub generation: f64,
    pub curtailment: f64,
    pub redispatch: f64,
    pub total: f64,
}

impl StageCosts {
    pub fn new(generation: f64, curtailment: f64, redispatch: f64) -> Self {
        StageCosts {
            generation,
            curtailment,
            redispatch,
            total: generation + curtailment + redispatch,
        }
    }
}

/// Congestion-management volumes in MWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volumes {
    pub curtailment_mwh: f64,
    pub redispatch_mwh: f64,
    pub combined_mwh: f64,
}

/// Monte-Carlo evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub samples: usize,
    pub infeasible: usize,
    pub seed: u64,
    pub mean_cm_cost: f64,
    pub mean_redispatch_mwh: f64,
    pub mean_curtailment_mwh: f64,
}

/// The consolidated, serializable outcome of one scenario run; the content
/// of `summary.json` and the input to scenario comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub mode: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub n_timesteps: usize,
    pub stage_sequence: Vec<String>,
    pub basecase: Option<StageCosts>,
    pub market: StageCosts,
    /// Exchange regularizer cost at the market stage, outside the totals.
    pub market_exchange_penalty: f64,
    /// Post-congestion-management system cost.
    pub cm: StageCosts,
    pub total_post_cm: f64,
    pub volumes: Volumes,
    pub mc: Option<McSummary>,
}

impl ScenarioReport {
    pub fn summary(&self) -> ScenarioSummary {
        let market = StageCosts::new(
            self.market.total_generation_cost(),
            self.market.total_curtailment_cost(),
            0.0,
        );
        let cm = StageCosts::new(
            self.redispatch.total_generation_cost(),
            self.redispatch.total_curtailment_cost(),
            self.redispatch.total_redispatch_cost(),
        );
        ScenarioSummary {
            name: self.config.name.clone(),
            mode: self.config.mode.as_str().to_string(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            n_timesteps: self.timesteps.len(),
            stage_sequence: self.stages.iter().map(|s| s.name.clone()).collect(),
            basecase: self.basecase.as_ref().map(|b| {
                StageCosts::new(b.total_generation_cost(), b.total_curtailment_cost(), 0.0)
            }),
            market,
            market_exchange_penalty: self.market.total_exchange_penalty_cost(),
            cm,
            total_post_cm: cm.total,
            volumes: Volumes {
                curtailment_mwh: self.redispatch.total_curtailment_mwh(),
                redispatch_mwh: self.redispatch.total_redispatch_mwh(),
                combined_mwh: self.redispatch.total_curtailment_mwh()
                    + self.redispatch.total_redispatch_mwh(),
            },
            mc: self.cm.as_ref().map(|cm| McSummary {
                samples: cm.samples.len() + cm.infeasible_samples.len(),
                infeasible: cm.infeasible_samples.len(),
                seed: self.config.seed,
                mean_cm_cost: cm.mean_total_cm_cost,
                mean_redispatch_mwh: cm.mean_redispatch_mwh,
                mean_curtailment_mwh: cm.mean_curtailment_mwh,
            }),
        }
    }
}

/// One emitted file with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Content listing of a run's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub files: Vec<FileEntry>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv_error(name: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("building {name}: {e}"))
}

fn csv_bytes(name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_error(name, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(name, e))?;
    }
    w.into_inner().map_err(|e| csv_error(name, e))
}

/// Write every table of the run plus `summary.json`, then `manifest.json`
/// listing all files with their content hashes.
pub fn emit_reports(report: &ScenarioReport, outdir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::Io {
        path: outdir.display().to_string(),
        source: e,
    })?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let n_t = report.timesteps.len();

    // market stage tables
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (g, id) in report.gen_ids.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    id.clone(),
                    fmt(report.market.timesteps[t].generation[g]),
                ]);
            }
        }
        files.push(("dispatch.csv".into(), csv_bytes("dispatch.csv", &["timestep", "gen_id", "mw"], &rows)?));
    }
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (r, id) in report.intermittent_ids.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    id.clone(),
                    fmt(report.market.timesteps[t].curtailment[r]),
                ]);
            }
        }
        files.push(("curtailment.csv".into(), csv_bytes("curtailment.csv", &["timestep", "gen_id", "mw"], &rows)?));
    }
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (z, zone) in report.zones.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    zone.clone(),
                    fmt(report.market.timesteps[t].net_positions[z]),
                ]);
            }
        }
        files.push(("net_positions.csv".into(), csv_bytes("net_positions.csv", &["timestep", "zone_id", "mw"], &rows)?));
    }
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            let ex = &report.market.timesteps[t].exchanges;
            for (a, from) in report.zones.iter().enumerate() {
                for (b, to) in report.zones.iter().enumerate() {
                    if a != b {
                        rows.push(vec![
                            report.timesteps[t].clone(),
                            from.clone(),
                            to.clone(),
                            fmt(ex[(a, b)]),
                        ]);
                    }
                }
            }
        }
        files.push(("exchanges.csv".into(), csv_bytes("exchanges.csv", &["timestep", "from_zone", "to_zone", "mw"], &rows)?));
    }
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (l, id) in report.line_ids.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    id.clone(),
                    fmt(report.market.timesteps[t].line_flows[l]),
                ]);
            }
        }
        files.push(("flows.csv".into(), csv_bytes("flows.csv", &["timestep", "line_id", "mw"], &rows)?));
    }

    // congestion-management stage tables
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (k, id) in report.dispatchable_ids.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    id.clone(),
                    fmt(report.redispatch.timesteps[t].redispatch[k]),
                ]);
            }
        }
        files.push(("redispatch.csv".into(), csv_bytes("redispatch.csv", &["timestep", "gen_id", "delta_mw"], &rows)?));
    }
    {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (r, id) in report.intermittent_ids.iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    id.clone(),
                    fmt(report.redispatch.timesteps[t].curtailment[r]),
                ]);
            }
        }
        files.push(("cm_curtailment.csv".into(), csv_bytes("cm_curtailment.csv", &["timestep", "gen_id", "mw"], &rows)?));
    }

    // cost decomposition
    {
        fn stage_rows(rows: &mut Vec<Vec<String>>, name: &str, c: &StageCosts) {
            rows.push(vec![name.to_string(), "generation".into(), fmt(c.generation)]);
            rows.push(vec![name.to_string(), "curtailment".into(), fmt(c.curtailment)]);
            rows.push(vec![name.to_string(), "redispatch".into(), fmt(c.redispatch)]);
            rows.push(vec![name.to_string(), "total".into(), fmt(c.total)]);
        }
        let summary = report.summary();
        let mut rows = Vec::new();
        if let Some(b) = &summary.basecase {
            stage_rows(&mut rows, "basecase", b);
        }
        stage_rows(&mut rows, "market", &summary.market);
        rows.push(vec![
            "market".into(),
            "exchange_penalty".into(),
            fmt(summary.market_exchange_penalty),
        ]);
        stage_rows(&mut rows, "cm", &summary.cm);
        files.push(("costs.csv".into(), csv_bytes("costs.csv", &["stage", "component", "value"], &rows)?));
    }

    // flow-based parameters
    if let Some(fb) = &report.fb {
        let mut header: Vec<String> = vec!["timestep".into(), "cnec_id".into(), "contingency_id".into()];
        for zone in fb.zones() {
            header.push(format!("ptdf_{zone}"));
        }
        header.extend(
            ["f_ref_mw", "frm_mw", "fav_mw", "ram_mw", "ram_reverse_mw"]
                .iter()
                .map(|s| s.to_string()),
        );
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut rows = Vec::new();
        for t in 0..fb.n_timesteps() {
            let ts = fb.timestep(t);
            for (j, cnec) in fb.cnecs().entries().iter().enumerate() {
                let mut row = vec![
                    report.timesteps[t].clone(),
                    cnec.line_id.clone(),
                    cnec.contingency_id.clone().unwrap_or_default(),
                ];
                for z in 0..fb.zones().len() {
                    row.push(fmt(ts.ptdf_z[(j, z)]));
                }
                row.push(fmt(ts.f_ref[j]));
                row.push(fmt(ts.frm[j]));
                row.push(fmt(ts.fav[j]));
                row.push(fmt(ts.ram[j]));
                row.push(fmt(ts.ram_reverse[j]));
                rows.push(row);
            }
        }
        files.push(("fb_params.csv".into(), csv_bytes("fb_params.csv", &header_refs, &rows)?));
    }

    // chance-constrained extras
    if let Some(alpha) = &report.alpha {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (k, id) in report.dispatchable_ids.iter().enumerate() {
                rows.push(vec![report.timesteps[t].clone(), id.clone(), fmt(alpha[t][k])]);
            }
        }
        files.push(("alpha.csv".into(), csv_bytes("alpha.csv", &["timestep", "gen_id", "alpha"], &rows)?));
    }
    if let (Some(t_std), Some(z_eps), Some(fb)) = (&report.t_std, report.z_eps, &report.fb) {
        let mut rows = Vec::new();
        for t in 0..n_t {
            for (j, cnec) in fb.cnecs().entries().iter().enumerate() {
                rows.push(vec![
                    report.timesteps[t].clone(),
                    cnec.label(),
                    fmt(t_std[t][j]),
                    fmt(z_eps * t_std[t][j]),
                ]);
            }
        }
        files.push(("frm.csv".into(), csv_bytes("frm.csv", &["timestep", "cnec", "t_std_mw", "margin_mw"], &rows)?));
    }

    // Monte-Carlo evaluation
    if let Some(cm) = &report.cm {
        let mut rows = Vec::new();
        for s in &cm.samples {
            for t in 0..n_t {
                rows.push(vec![
                    s.sample_id.to_string(),
                    report.timesteps[t].clone(),
                    fmt(s.redispatch_cost[t]),
                    fmt(s.curtailment_delta_cost[t]),
                    fmt(s.curtailment_cost[t]),
                    fmt(s.redispatch_mwh[t]),
                    fmt(s.curtailment_mwh[t]),
                ]);
            }
        }
        files.push((
            "cm_stats.csv".into(),
            csv_bytes(
                "cm_stats.csv",
                &["sample_id", "timestep", "redispatch_cost", "curtailment_delta_cost", "curtailment_cost", "redispatch_mwh", "curtailment_mwh"],
                &rows,
            )?,
        ));
        let mut rows = Vec::new();
        for t in 0..n_t {
            rows.push(vec![
                report.timesteps[t].clone(),
                fmt(cm.envelope[t].min),
                fmt(cm.envelope[t].mean),
                fmt(cm.envelope[t].max),
                fmt(cm.deterministic[t]),
            ]);
        }
        files.push((
            "cm_envelope.csv".into(),
            csv_bytes("cm_envelope.csv", &["timestep", "min", "mean", "max", "deterministic"], &rows)?,
        ));
    }

    // consolidated summary
    {
        let mut bytes = serde_json::to_vec_pretty(&report.summary())
            .map_err(|e| csv_error("summary.json", e))?;
        bytes.push(b'\n');
        files.push(("summary.json".into(), bytes));
    }

    // write everything, hash, then the manifest itself
    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = outdir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        entries.push(FileEntry {
            name: name.clone(),
            sha256: hex(&Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = Manifest {
        config_hash: report.config_hash.clone(),
        dataset_hash: report.dataset_hash.clone(),
        files: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| csv_error("manifest.json", e))?;
    bytes.push(b'\n');
    let path = outdir.join("manifest.json");
    std::fs::write(&path, &bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(manifest)
}

/// Write a domain slice as halfplane and vertex tables plus, on request, a
/// small standalone SVG rendering.
pub fn emit_domain_slice(
    slice: &DomainSlice,
    outdir: &Path,
    stem: &str,
    svg: bool,
) -> Result<Vec<FileEntry>> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::Io {
        path: outdir.display().to_string(),
        source: e,
    })?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();

    let rows: Vec<Vec<String>> = slice
        .halfplanes
        .iter()
        .map(|hp| vec![hp.label.clone(), fmt(hp.a.0), fmt(hp.a.1), fmt(hp.b)])
        .collect();
    files.push((
        format!("{stem}_halfplanes.csv"),
        csv_bytes("halfplanes", &["cnec", "coeff_x", "coeff_y", "rhs_mw"], &rows)?,
    ));

    let rows: Vec<Vec<String>> = slice
        .vertices
        .iter()
        .map(|(x, y)| vec![fmt(*x), fmt(*y)])
        .collect();
    files.push((
        format!("{stem}_vertices.csv"),
        csv_bytes("vertices", &["x_mw", "y_mw"], &rows)?,
    ));

    if svg {
        files.push((format!("{stem}.svg"), slice_svg(slice).into_bytes()));
    }

    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = outdir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        entries.push(FileEntry {
            name: name.clone(),
            sha256: hex(&Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }
    Ok(entries)
}

fn slice_svg(slice: &DomainSlice) -> String {
    let (xa, xb) = &slice.x_axis;
    let (ya, yb) = &slice.y_axis;
    if slice.vertices.is_empty() {
        return format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"420\" viewBox=\"0 0 420 420\">\n\
             <text x=\"210\" y=\"210\" text-anchor=\"middle\" font-family=\"sans-serif\">empty domain ({xa}&gt;{xb} / {ya}&gt;{yb})</text>\n</svg>\n"
        );
    }
    let xs: Vec<f64> = slice.vertices.iter().map(|v| v.0).collect();
    let ys: Vec<f64> = slice.vertices.iter().map(|v| v.1).collect();
    let (mut lo_x, mut hi_x) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (mut lo_y, mut hi_y) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if let Some((mx, my)) = slice.marker {
        lo_x = lo_x.min(mx);
        hi_x = hi_x.max(mx);
        lo_y = lo_y.min(my);
        hi_y = hi_y.max(my);
    }
    let pad_x = 0.1 * (hi_x - lo_x).max(1.0);
    let pad_y = 0.1 * (hi_y - lo_y).max(1.0);
    let (lo_x, hi_x, lo_y, hi_y) = (lo_x - pad_x, hi_x + pad_x, lo_y - pad_y, hi_y + pad_y);
    let w = 420.0;
    let scale_x = w / (hi_x - lo_x);
    let scale_y = w / (hi_y - lo_y);
    let px = |x: f64| (x - lo_x) * scale_x;
    let py = |y: f64| w - (y - lo_y) * scale_y;

    let points: Vec<String> = slice
        .vertices
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"460\" height=\"460\" viewBox=\"-30 -10 460 460\">\n"
    ));
    // zero axes when inside the view
    if lo_x < 0.0 && hi_x > 0.0 {
        svg.push_str(&format!(
            "<line x1=\"{0:.2}\" y1=\"0\" x2=\"{0:.2}\" y2=\"{1:.2}\" stroke=\"#bbb\"/>\n",
            px(0.0),
            w
        ));
    }
    if lo_y < 0.0 && hi_y > 0.0 {
        svg.push_str(&format!(
            "<line x1=\"0\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"#bbb\"/>\n",
            py(0.0),
            w
        ));
    }
    svg.push_str(&format!(
        "<polygon points=\"{}\" fill=\"#7aa6c2\" fill-opacity=\"0.45\" stroke=\"#2c5f82\" stroke-width=\"1.5\"/>\n",
        points.join(" ")
    ));
    if let Some((mx, my)) = slice.marker {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#c0392b\"/>\n",
            px(mx),
            py(my)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"450\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">np {xa} &#8594; {xb} [MW]</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"-20\" y=\"{:.0}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 -20 {:.0})\">np {ya} &#8594; {yb} [MW]</text>\n",
        w / 2.0,
        w / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// One cell of the cross-scenario comparison, in plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scenario: String,
    pub stage: String,
    pub component: String,
    pub value: f64,
}

/// Side-by-side stage/cost matrix over scenarios sharing a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_hash: String,
    pub scenarios: Vec<String>,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    /// The value of one cell, if present.
    pub fn value(&self, scenario: &str, stage: &str, component: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.stage == stage && r.component == component)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.scenario.clone(), r.stage.clone(), r.component.clone(), fmt(r.value)])
            .collect();
        csv_bytes("comparison.csv", &["scenario", "stage", "component", "value"], &rows)
    }
}

/// Build the comparison table. All summaries must stem from the same
/// dataset; scenario names must be distinct.
pub fn compare_scenarios(summaries: &[ScenarioSummary]) -> Result<Comparison> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Config("nothing to compare".into()))?;
    for s in summaries {
        if s.dataset_hash != first.dataset_hash {
            return Err(Error::Config(format!(
                "scenario {} was run on a different dataset ({} vs {})",
                s.name,
                &s.dataset_hash[..12.min(s.dataset_hash.len())],
                &first.dataset_hash[..12.min(first.dataset_hash.len())]
            )));
        }
    }
    let mut names = Vec::new();
    let mut rows = Vec::new();
    for s in summaries {
        if names.contains(&s.name) {
            return Err(Error::Config(format!("duplicate scenario name {:?}", s.name)));
        }
        names.push(s.name.clone());
        let mut stage = |stage: &str, c: &StageCosts| {
            for (component, value) in [
                ("generation", c.generation),
                ("curtailment", c.curtailment),
                ("redispatch", c.redispatch),
                ("total", c.total),
            ] {
                rows.push(CompareRow {
                    scenario: s.name.clone(),
                    stage: stage.to_string(),
                    component: component.to_string(),
                    value,
                });
            }
        };
        if let Some(b) = &s.basecase {
            stage("basecase", b);
        }
        stage("market", &s.market);
        stage("cm", &s.cm);
        for (component, value) in [
            ("curtailment_mwh", s.volumes.curtailment_mwh),
            ("redispatch_mwh", s.volumes.redispatch_mwh),
            ("combined_mwh", s.volumes.combined_mwh),
        ] {
            rows.push(CompareRow {
                scenario: s.name.clone(),
                stage: "volumes".to_string(),
                component: component.to_string(),
                value,
            });
        }
        if let Some(mc) = &s.mc {
            rows.push(CompareRow {
                scenario: s.name.clone(),
                stage: "montecarlo".to_string(),
                component: "mean_cm_cost".to_string(),
                value: mc.mean_cm_cost,
            });
        }
    }
    Ok(Comparison {
        dataset_hash: first.dataset_hash.clone(),
        scenarios: names,
        rows,
    })
}

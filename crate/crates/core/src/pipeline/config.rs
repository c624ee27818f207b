//! Scenario configuration: a single TOML file, `--set key=value` overrides,
//! and mode-dependent defaults resolved into a concrete, hashable config.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Market-clearing scenario per the model configuration table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Flow-based coupling, minRAM 20%, internal and cross-border CNEs.
    Fbmc,
    /// Flow-based coupling, minRAM 70%, cross-border CNEs only.
    FbmcPlus,
    /// FbmcPlus cleared chance-constrained with endogenous margins.
    FbmcCc,
    /// Bilateral exchange limits.
    Ntc,
    /// Full nodal network representation.
    Nodal,
    /// No network constraints at the market stage.
    Uniform,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fbmc => "fbmc",
            Mode::FbmcPlus => "fbmc_plus",
            Mode::FbmcCc => "fbmc_cc",
            Mode::Ntc => "ntc",
            Mode::Nodal => "nodal",
            Mode::Uniform => "uniform",
        }
    }

    pub fn is_flow_based(&self) -> bool {
        matches!(self, Mode::Fbmc | Mode::FbmcPlus | Mode::FbmcCc)
    }

    /// Mode-specific minRAM default applied when the config omits it.
    pub fn default_minram(&self) -> f64 {
        match self {
            Mode::Fbmc => 0.2,
            Mode::FbmcPlus | Mode::FbmcCc => 0.7,
            _ => 0.2,
        }
    }

    /// Whether this mode restricts the CNEC set to cross-border lines by default.
    pub fn default_cross_border_only(&self) -> bool {
        matches!(self, Mode::FbmcPlus | Mode::FbmcCc)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbmc" => Ok(Mode::Fbmc),
            "fbmc_plus" => Ok(Mode::FbmcPlus),
            "fbmc_cc" => Ok(Mode::FbmcCc),
            "ntc" => Ok(Mode::Ntc),
            "nodal" => Ok(Mode::Nodal),
            "uniform" => Ok(Mode::Uniform),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected fbmc, fbmc_plus, fbmc_cc, ntc, nodal or uniform"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exchange limits for ntc mode: one value for every border, or explicit
/// directed pairs (unlisted directions are closed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NtcSpec {
    Uniform(f64),
    Pairs(Vec<(String, String, f64)>),
}

/// Fully resolved scenario configuration. All mode defaults are applied;
/// hashing this resolved form makes two spellings of the same scenario
/// hash identically.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub dataset: PathBuf,
    pub mode: Mode,
    pub minram: f64,
    pub z2z_threshold: f64,
    pub outage_sensitivity: f64,
    pub cross_border_only: bool,
    pub ntc: Option<NtcSpec>,
    pub epsilon: f64,
    pub relative_std: f64,
    pub correlation: f64,
    pub curtailment_penalty: f64,
    pub redispatch_penalty: f64,
    pub exchange_penalty: f64,
    pub capacity_scale: f64,
    pub samples: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

// Raw on-disk shape. Everything that has a default is optional so the
// config file can stay minimal; unknown keys are typos and rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    dataset: String,
    mode: String,
    /// Reserved for long-term allocations; rejected when present.
    lta: Option<toml::Value>,
    #[serde(default)]
    market: RawMarket,
    #[serde(default)]
    cnec: RawCnec,
    ntc: Option<RawNtc>,
    #[serde(default)]
    uncertainty: RawUncertainty,
    #[serde(default)]
    montecarlo: RawMonteCarlo,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarket {
    minram: Option<f64>,
    curtailment_penalty: Option<f64>,
    redispatch_penalty: Option<f64>,
    exchange_penalty: Option<f64>,
    capacity_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCnec {
    z2z_threshold: Option<f64>,
    outage_sensitivity: Option<f64>,
    cross_border_only: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNtc {
    uniform_mw: Option<f64>,
    pairs: Option<Vec<RawNtcPair>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNtcPair {
    from: String,
    to: String,
    mw: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUncertainty {
    epsilon: Option<f64>,
    relative_std: Option<f64>,
    correlation: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonteCarlo {
    samples: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

impl ScenarioConfig {
    /// Load a config file and apply `--set key=value` overrides (dotted
    /// keys, e.g. `market.minram=0.7`), then resolve mode defaults.
    /// Relative dataset and output paths are taken relative to the config
    /// file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let raw: RawConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(raw, base)
    }

    fn resolve(raw: RawConfig, base: &Path) -> Result<ScenarioConfig> {
        if raw.lta.is_some() {
            return Err(Error::Config(
                "lta is a reserved placeholder for long-term allocations and must not be set".into(),
            ));
        }
        let mode: Mode = raw.mode.parse()?;
        let ntc = match raw.ntc {
            None => None,
            Some(n) => Some(match (n.uniform_mw, n.pairs) {
                (Some(mw), None) => NtcSpec::Uniform(mw),
                (None, Some(pairs)) => NtcSpec::Pairs(
                    pairs.into_iter().map(|p| (p.from, p.to, p.mw)).collect(),
                ),
                _ => {
                    return Err(Error::Config(
                        "ntc section needs exactly one of uniform_mw or pairs".into(),
                    ))
                }
            }),
        };

        let config = ScenarioConfig {
            name: raw.name.unwrap_or_else(|| mode.as_str().to_string()),
            dataset: base.join(raw.dataset),
            mode,
            minram: raw.market.minram.unwrap_or_else(|| mode.default_minram()),
            z2z_threshold: raw.cnec.z2z_threshold.unwrap_or(0.05),
            outage_sensitivity: raw.cnec.outage_sensitivity.unwrap_or(0.05),
            cross_border_only: raw
                .cnec
                .cross_border_only
                .unwrap_or_else(|| mode.default_cross_border_only()),
            ntc,
            epsilon: raw.uncertainty.epsilon.unwrap_or(0.05),
            relative_std: raw.uncertainty.relative_std.unwrap_or(0.1),
            correlation: raw.uncertainty.correlation.unwrap_or(0.0),
            curtailment_penalty: raw.market.curtailment_penalty.unwrap_or(100.0),
            redispatch_penalty: raw.market.redispatch_penalty.unwrap_or(50.0),
            exchange_penalty: raw.market.exchange_penalty.unwrap_or(0.01),
            capacity_scale: raw.market.capacity_scale.unwrap_or(1.0),
            samples: raw.montecarlo.samples.unwrap_or(20),
            seed: raw.montecarlo.seed.unwrap_or(42),
            out_dir: raw.output.dir.map(|d| base.join(d)),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.minram) {
            return Err(Error::Config(format!(
                "market.minram must lie in [0, 1], got {}",
                self.minram
            )));
        }
        if self.capacity_scale <= 0.0 || !self.capacity_scale.is_finite() {
            return Err(Error::Config(format!(
                "market.capacity_scale must be > 0, got {}",
                self.capacity_scale
            )));
        }
        for (label, v) in [
            ("market.curtailment_penalty", self.curtailment_penalty),
            ("market.redispatch_penalty", self.redispatch_penalty),
            ("market.exchange_penalty", self.exchange_penalty),
            ("cnec.z2z_threshold", self.z2z_threshold),
            ("cnec.outage_sensitivity", self.outage_sensitivity),
            ("uncertainty.relative_std", self.relative_std),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{label} must be >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "uncertainty.epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::Config(format!(
                "uncertainty.correlation must lie in [0, 1), got {}",
                self.correlation
            )));
        }
        if self.mode == Mode::Ntc && self.ntc.is_none() {
            return Err(Error::Config(
                "ntc mode requires an [ntc] section with uniform_mw or pairs".into(),
            ));
        }
        if let Some(NtcSpec::Uniform(mw)) = &self.ntc {
            if *mw < 0.0 {
                return Err(Error::Config(format!("ntc.uniform_mw must be >= 0, got {mw}")));
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration; combined with the seed it pins
    /// every emitted byte of a run.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

/// Hash of the dataset directory: the five CSV files in contract order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ["nodes.csv", "lines.csv", "generators.csv", "demand.csv", "availability.csv"] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Apply one `--set a.b.c=value` override onto the parsed TOML tree. The
/// value is parsed as TOML (numbers, booleans, strings, arrays); bare words
/// fall back to strings.
fn set_dotted(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let parsed = parse_toml_value(value);
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override {key:?}: {part} is not a table"))
            })?;
    }
    current.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    // wrap as a document so plain values parse with full TOML syntax
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("scenario.toml");
        fs::write(&path, body).unwrap();
        path
    }

    const MINIMAL: &str = "dataset = \"data\"\nmode = \"fbmc\"\n";

    #[test]
    fn minimal_config_gets_mode_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_config(tmp.path(), MINIMAL);
        let cfg = ScenarioConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.mode, Mode::Fbmc);
        assert_eq!(cfg.minram, 0.2);
        assert!(!cfg.cross_border_only);
        assert_eq!(cfg.samples, 20);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.name, "fbmc");
        assert_eq!(cfg.dataset, tmp.path().join("data"));
    }

    #[test]
    fn fbmc_plus_defaults_differ() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_config(tmp.path(), "dataset = \"data\"\nmode = \"fbmc_plus\"\n");
        let cfg = ScenarioConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.minram, 0.7);
        assert!(cfg.cross_border_only);
    }

    #[test]
    fn overrides_take_effect_and_change_hash() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_config(tmp.path(), MINIMAL);
        let base = ScenarioConfig::load(&path, &[]).unwrap();
        let over = ScenarioConfig::load(
            &path,
            &[
                ("market.minram".into(), "0.7".into()),
                ("montecarlo.seed".into(), "7".into()),
                ("mode".into(), "fbmc_plus".into()),
            ],
        )
        .unwrap();
        assert_eq!(over.minram, 0.7);
        assert_eq!(over.seed, 7);
        assert_eq!(over.mode, Mode::FbmcPlus);
        assert_ne!(base.hash(), over.hash());
        // identical resolved settings hash identically regardless of spelling
        let spelled = write_config(
            tmp.path(),
            "dataset = \"data\"\nmode = \"fbmc\"\n[market]\nminram = 0.2\n",
        );
        let explicit = ScenarioConfig::load(&spelled, &[]).unwrap();
        assert_eq!(base.hash(), explicit.hash());
    }

    #[test]
    fn ntc_mode_requires_limits() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_config(tmp.path(), "dataset = \"data\"\nmode = \"ntc\"\n");
        let err = ScenarioConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("ntc"), "{err}");
        let ok = write_config(
            tmp.path(),
            "dataset = \"data\"\nmode = \"ntc\"\n[ntc]\nuniform_mw = 500.0\n",
        );
        let cfg = ScenarioConfig::load(&ok, &[]).unwrap();
        assert_eq!(cfg.ntc, Some(NtcSpec::Uniform(500.0)));
    }

    #[test]
    fn lta_placeholder_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = write_config(
            tmp.path(),
            "dataset = \"data\"\nmode = \"fbmc\"\n[lta]\nfile = \"x.csv\"\n",
        );
        let err = ScenarioConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("lta"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let typo = write_config(tmp.path(), "dataset = \"data\"\nmode = \"fbmc\"\nminrm = 0.2\n");
        assert!(ScenarioConfig::load(&typo, &[]).is_err());
        let path = write_config(tmp.path(), MINIMAL);
        for (k, v) in [
            ("market.minram", "1.5"),
            ("market.capacity_scale", "0.0"),
            ("uncertainty.epsilon", "0.5"),
            ("uncertainty.correlation", "1.0"),
            ("mode", "zonal"),
        ] {
            let err = ScenarioConfig::load(&path, &[(k.into(), v.into())]);
            assert!(err.is_err(), "{k}={v} should be rejected");
        }
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let tmp = tempfile::tempdir().unwrap();
        for name in ["nodes.csv", "lines.csv", "generators.csv", "demand.csv", "availability.csv"] {
            fs::write(tmp.path().join(name), format!("{name} body\n")).unwrap();
        }
        let h1 = dataset_hash(tmp.path()).unwrap();
        let h2 = dataset_hash(tmp.path()).unwrap();
        assert_eq!(h1, h2);
        fs::write(tmp.path().join("demand.csv"), "changed\n").unwrap();
        assert_ne!(h1, dataset_hash(tmp.path()).unwrap());
    }
}

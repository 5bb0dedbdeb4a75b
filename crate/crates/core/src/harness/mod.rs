//! Scenario runner. A [`RunManifest`] lists scenarios; each one produces CSV
//! tables, a JSON summary and optionally an SVG plot, all stamped with the
//! device-config hash and tool version.

mod criteria;
mod plot;
pub mod scenarios;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{DeviceConfig, UvPath};
use crate::error::{Error, Result};
use crate::montecarlo::{splitmix64, ChannelConfig, ChannelRole};

pub use criteria::{run_criteria, CriterionResult, VerifyReport};
pub use plot::{svg_plot, Series};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Overrides the manifest's output directory.
pub const OUT_DIR_ENV: &str = "QFC_OUT_DIR";

const DEFAULT_MANIFEST: &str = include_str!("../../data/default_manifest.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    EfficiencySweep,
    SnrSweep,
    NoiseSweep,
    NoiseSpectrum,
    CoincidenceSi,
    CoincidenceSo,
    FockDemo,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::EfficiencySweep,
        ScenarioKind::SnrSweep,
        ScenarioKind::NoiseSweep,
        ScenarioKind::NoiseSpectrum,
        ScenarioKind::CoincidenceSi,
        ScenarioKind::CoincidenceSo,
        ScenarioKind::FockDemo,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::EfficiencySweep => "efficiency_sweep",
            ScenarioKind::SnrSweep => "snr_sweep",
            ScenarioKind::NoiseSweep => "noise_sweep",
            ScenarioKind::NoiseSpectrum => "noise_spectrum",
            ScenarioKind::CoincidenceSi => "coincidence_si",
            ScenarioKind::CoincidenceSo => "coincidence_so",
            ScenarioKind::FockDemo => "fock_demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Csv,
    Json,
    Svg,
}

fn default_outputs() -> Vec<Artifact> {
    vec![Artifact::Csv, Artifact::Json]
}

/// Inclusive range a summary metric must fall in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        !v.is_nan() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    /// Pump powers of a sweep, or the single pump power of other kinds.
    #[serde(default)]
    pub pump_mw: Vec<f64>,
    /// UV filter paths for noise and SNR sweeps.
    #[serde(default)]
    pub paths: Vec<UvPath>,
    /// Acquisition time per simulated run.
    pub duration_s: Option<f64>,
    /// Independent repetitions of a noise sweep.
    pub seeds: Option<u32>,
    pub bin_width_ps: Option<u64>,
    /// Histogram half-range in bins.
    pub bins_each_side: Option<u32>,
    /// Pump amplitudes for `fock_demo`.
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    /// Replaces the preset detector channels of a coincidence scenario.
    pub channels: Option<Vec<ChannelConfig>>,
    /// Expected ranges of summary metrics.
    #[serde(default)]
    pub expect: BTreeMap<String, Bounds>,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<Artifact>,
}

impl Scenario {
    pub fn new(name: &str, kind: ScenarioKind) -> Self {
        Self {
            name: name.into(),
            kind,
            pump_mw: Vec::new(),
            paths: Vec::new(),
            duration_s: None,
            seeds: None,
            bin_width_ps: None,
            bins_each_side: None,
            amplitudes: Vec::new(),
            kappa: None,
            gamma: None,
            channels: None,
            expect: BTreeMap::new(),
            outputs: default_outputs(),
        }
    }

    /// Checks that the fields `kind` needs are present and sane.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(format!("scenario `{}`: {msg}", self.name)));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::config(format!(
                "scenario name `{}` must be non-empty and use only [A-Za-z0-9_-]",
                self.name
            )));
        }
        if let Some(p) = self.pump_mw.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return fail(format!("pump power {p} must be finite and >= 0"));
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0 && d.is_finite()) {
                return fail(format!("duration_s must be positive, got {d}"));
            }
        }
        if self.seeds == Some(0) {
            return fail("seeds must be at least 1".into());
        }
        if self.bin_width_ps == Some(0) {
            return fail("bin_width_ps must be positive".into());
        }
        if matches!(self.bins_each_side, Some(b) if b < 2) {
            return fail("bins_each_side must be at least 2".into());
        }
        for (name, v) in [("kappa", self.kappa), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return fail(format!("{name} must be finite and >= 0"));
                }
            }
        }
        match self.kind {
            ScenarioKind::EfficiencySweep | ScenarioKind::SnrSweep | ScenarioKind::NoiseSweep => {
                if self.pump_mw.is_empty() {
                    return fail("empty sweep list `pump_mw`".into());
                }
                if self.kind != ScenarioKind::EfficiencySweep && self.pump_mw.contains(&0.0) {
                    return fail("simulated sweeps need pump powers > 0".into());
                }
                if self.kind == ScenarioKind::NoiseSweep && self.pump_mw.len() < 3 {
                    return fail("a power-law fit needs at least 3 pump powers".into());
                }
            }
            ScenarioKind::NoiseSpectrum | ScenarioKind::CoincidenceSi | ScenarioKind::CoincidenceSo => {
                if self.pump_mw.len() != 1 {
                    return fail(format!("needs exactly one pump power, got {}", self.pump_mw.len()));
                }
                if self.kind != ScenarioKind::NoiseSpectrum && self.pump_mw[0] == 0.0 {
                    return fail("coincidence runs need pump power > 0".into());
                }
            }
            ScenarioKind::FockDemo => {
                if self.amplitudes.is_empty() {
                    return fail("empty sweep list `amplitudes`".into());
                }
                if self.amplitudes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return fail("amplitudes must be finite and > 0".into());
                }
            }
        }
        if let Some(chans) = &self.channels {
            let need: &[ChannelRole] = match self.kind {
                ScenarioKind::CoincidenceSi => &[ChannelRole::Signal, ChannelRole::Idler],
                ScenarioKind::CoincidenceSo => &[ChannelRole::Signal, ChannelRole::Uv],
                _ => return fail("`channels` only applies to coincidence scenarios".into()),
            };
            for role in need {
                if !chans.iter().any(|c| c.role == *role) {
                    return fail(format!("channel list lacks a {role:?} channel"));
                }
            }
        }
        Ok(())
    }

    /// Seed for this scenario, independent of its position in the manifest.
    pub fn derived_seed(&self, global: u64) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        splitmix64(global ^ h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Device configuration file; the bundled calibration when absent.
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

impl RunManifest {
    /// One scenario of every kind with the expected values of a calibrated
    /// device.
    pub fn bundled() -> Self {
        Self::from_toml(DEFAULT_MANIFEST).expect("bundled manifest parses")
    }

    pub fn bundled_toml() -> &'static str {
        DEFAULT_MANIFEST
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::config(format!("invalid manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m = Self::from_toml(&text)?;
        // relative config paths are relative to the manifest
        if let (Some(cfg), Some(dir)) = (&m.config, path.parent()) {
            if cfg.is_relative() {
                m.config = Some(dir.join(cfg));
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported manifest schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (k, s) in self.scenarios.iter().enumerate() {
            if self.scenarios[..k].iter().any(|o| o.name == s.name) {
                return Err(Error::config(format!("duplicate scenario name `{}`", s.name)));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn device_config(&self) -> Result<DeviceConfig> {
        match &self.config {
            Some(p) => DeviceConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::config(format!("cannot read device config {}: {io}", p.display())),
                other => other,
            }),
            None => Ok(DeviceConfig::bundled()),
        }
    }

    /// Output directory: the environment override, then the manifest, then
    /// `out`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn scenario(&self, kind: ScenarioKind) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.kind == kind)
    }
}

/// Shared inputs of every scenario in a run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: DeviceConfig,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn new(config: DeviceConfig, seed: u64, out_dir: PathBuf) -> Self {
        let config_hash = config.hash();
        Self {
            config,
            config_hash,
            seed,
            out_dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub value: Option<f64>,
    pub bounds: Bounds,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub kind: ScenarioKind,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub artifacts: Vec<String>,
}

/// A CSV table before metadata is attached.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Column `name` parsed as numbers.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        self.rows.iter().map(|r| r[k].parse().ok()).collect()
    }
}

/// Formats a number so that parsing it back yields the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Everything a scenario computed, before it is written out.
pub(crate) struct ScenarioData {
    pub tables: Vec<(String, TableOut)>,
    pub plot: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

pub(crate) enum TableOut {
    Plain(Table),
    Histogram(crate::tagcorr::CoincidenceHistogram),
}

/// Writes a table as CSV preceded by `# key=value` metadata lines.
pub fn write_table_csv<W: Write>(table: &Table, meta: &BTreeMap<String, String>, mut out: W) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    writeln!(out, "{}", table.columns.join(","))?;
    for r in &table.rows {
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

pub fn read_table_csv<R: BufRead>(input: R) -> Result<(BTreeMap<String, String>, Table)> {
    let mut meta = BTreeMap::new();
    let mut table: Option<Table> = None;
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# ") {
            let (key, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: bad metadata line", k + 1)))?;
            meta.insert(key.to_string(), v.to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        match &mut table {
            None => {
                table = Some(Table {
                    columns: cells,
                    rows: Vec::new(),
                })
            }
            Some(t) => {
                if cells.len() != t.columns.len() {
                    return Err(Error::Format(format!(
                        "line {}: {} cells, header has {}",
                        k + 1,
                        cells.len(),
                        t.columns.len()
                    )));
                }
                t.rows.push(cells);
            }
        }
    }
    let table = table.ok_or_else(|| Error::Format("CSV has no header".into()))?;
    Ok((meta, table))
}

/// Runs one scenario and writes its artifacts into `ctx.out_dir`.
///
/// Nothing is written if validation or computation fails; files written
/// before an I/O failure are removed.
pub fn run_scenario(scenario: &Scenario, ctx: &RunContext) -> Result<ScenarioSummary> {
    scenario.validate()?;
    let seed = scenario.derived_seed(ctx.seed);
    let data = scenarios::compute(scenario, ctx, seed)?;

    let checks: Vec<Check> = scenario
        .expect
        .iter()
        .map(|(metric, bounds)| {
            let value = data.metrics.get(metric).copied();
            Check {
                metric: metric.clone(),
                value,
                bounds: *bounds,
                passed: value.is_some_and(|v| bounds.contains(v)),
            }
        })
        .collect();
    let mut summary = ScenarioSummary {
        name: scenario.name.clone(),
        kind: scenario.kind,
        tool_version: crate::VERSION.to_string(),
        config_hash: ctx.config_hash.clone(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        metrics: data.metrics.clone(),
        checks,
        artifacts: Vec::new(),
    };

    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_artifacts(scenario, ctx, seed, &data, &mut summary, &mut written);
    if let Err(e) = result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(summary)
}

fn write_artifacts(
    scenario: &Scenario,
    ctx: &RunContext,
    seed: u64,
    data: &ScenarioData,
    summary: &mut ScenarioSummary,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    fs::create_dir_all(&ctx.out_dir)?;
    let meta: BTreeMap<String, String> = [
        ("tool_version", crate::VERSION.to_string()),
        ("config_hash", ctx.config_hash.clone()),
        ("scenario", scenario.name.clone()),
        ("seed", seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let mut create = |file: String| -> Result<(fs::File, String)> {
        let path = ctx.out_dir.join(&file);
        let f = fs::File::create(&path)?;
        written.push(path);
        Ok((f, file))
    };
    let mut names = Vec::new();
    if scenario.outputs.contains(&Artifact::Csv) {
        for (suffix, table) in &data.tables {
            let file = if suffix.is_empty() {
                format!("{}.csv", scenario.name)
            } else {
                format!("{}_{suffix}.csv", scenario.name)
            };
            let (f, file) = create(file)?;
            let mut w = std::io::BufWriter::new(f);
            match table {
                TableOut::Plain(t) => write_table_csv(t, &meta, &mut w)?,
                TableOut::Histogram(h) => crate::tagcorr::write_histogram_csv(h, &ctx.config_hash, &mut w)?,
            }
            w.flush()?;
            names.push(file);
        }
    }
    if scenario.outputs.contains(&Artifact::Svg) {
        if let Some(svg) = &data.plot {
            let (mut f, file) = create(format!("{}.svg", scenario.name))?;
            f.write_all(svg.as_bytes())?;
            names.push(file);
        }
    }
    if scenario.outputs.contains(&Artifact::Json) {
        let file = format!("{}_summary.json", scenario.name);
        names.push(file.clone());
        summary.artifacts = names.clone();
        let (f, _) = create(file)?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, summary).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
    }
    summary.artifacts = names;
    Ok(())
}

/// Runs every scenario of a manifest, concurrently. Summaries come back in
/// manifest order.
pub fn run_manifest(manifest: &RunManifest, ctx: &RunContext) -> Result<Vec<ScenarioSummary>> {
    manifest.validate()?;
    manifest.scenarios.par_iter().map(|s| run_scenario(s, ctx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_manifest_has_every_kind() {
        let m = RunManifest::bundled();
        for k in ScenarioKind::ALL {
            assert!(m.scenario(k).is_some(), "{k:?}");
        }
    }

    #[test]
    fn empty_sweep_is_a_config_error() {
        let s = Scenario::new("sweep", ScenarioKind::SnrSweep);
        let err = s.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("empty sweep"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut m = RunManifest::bundled();
        let dup = m.scenarios[0].clone();
        m.scenarios.push(dup);
        assert!(m.validate().is_err());
    }

    #[test]
    fn table_csv_round_trips() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![num(0.1), num(1e-300)]);
        t.push(vec![num(-2.5e17), num(f64::MIN_POSITIVE)]);
        let meta = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
        let mut buf = Vec::new();
        write_table_csv(&t, &meta, &mut buf).unwrap();
        let (m2, t2) = read_table_csv(buf.as_slice()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(t2, t);
        assert_eq!(t2.column("b").unwrap(), vec![1e-300, f64::MIN_POSITIVE]);
    }

    #[test]
    fn derived_seeds_depend_on_name_only() {
        let a = Scenario::new("a", ScenarioKind::FockDemo);
        let b = Scenario::new("b", ScenarioKind::FockDemo);
        assert_eq!(a.derived_seed(5), a.derived_seed(5));
        assert_ne!(a.derived_seed(5), b.derived_seed(5));
    }
}

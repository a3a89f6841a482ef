//! Experiment configuration: presets, TOML overrides and the config digest.
//!
//! A config file names a preset under `scenario` and overrides any subset of
//! its fields:
//!
//! ```toml
//! scenario = "1.2km"
//! seed = 7
//!
//! [timing]
//! modes_per_round = 5
//!
//! [emission]
//! collection_efficiency = 0.002
//! ```
//!
//! Sections: `timing`, `emission`, `beamsplitter`, `phase`, `link`, `budget`,
//! `ion_photon`, `coherence`, `scan`. Every field of every section is listed in
//! the README. Unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    exposure_for_infidelity, nbar_for_infidelity, p_sc_for_infidelity, sigma_phi_for_infidelity, CoherenceModel, ErrorBudgetParams, Scenario,
};
use crate::emission::EmissionParams;
use crate::optics::{BeamsplitterModel, InterferenceSetup};
use crate::phase::PhaseParams;
use crate::protocol::campaign::{LinkModel, LinkNoise};
use crate::protocol::{LinkConfig, TimingConfig};

/// Lamb-Dicke parameter of the readout pulses.
pub const LAMB_DICKE: f64 = 0.1;
/// Laser coherence time used by the laser row, ms.
pub const LASER_COHERENCE_MS: f64 = 5.0;
/// Timing jitter of the merge pulse, ns.
pub const MERGE_TIMING_JITTER_NS: f64 = 3.3;

/// Pump survival giving a ten-mode enhancement of 4.59.
pub const PUMP_SURVIVAL: f64 = 0.868_728;
/// Photons scattered by one state preparation.
pub const PREP_SCATTERS: f64 = 0.275_84;

/// Calibrated link parameters of one preset, from
/// [`crate::calibration::calibrate_presets`] with 20000 heralds and seed 11.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub collection_efficiency: f64,
    pub dark_rate_hz: f64,
    pub recoil_per_scatter: f64,
}

pub const CALIBRATION_20M: Calibration = Calibration { collection_efficiency: 0.009_733_5, dark_rate_hz: 2.154_9, recoil_per_scatter: 0.009_118 };
pub const CALIBRATION_1200M: Calibration = Calibration { collection_efficiency: 0.006_990_6, dark_rate_hz: 2.193_5, recoil_per_scatter: 0.009_118 };

/// Error budget rows of each scenario, in percent, in the order of
/// [`crate::analysis::BUDGET_ROWS`].
pub fn budget_rows_percent(s: Scenario) -> [f64; 9] {
    match s {
        Scenario::Short => [0.98, 0.41, 0.83, 0.80, 0.02, 0.6, 0.1, 0.1, 0.76],
        Scenario::Long => [0.98, 0.41, 0.31, 0.80, 0.17, 0.8, 0.2, 0.1, 0.33],
    }
}

/// Measured success rate of each scenario, s⁻¹.
pub fn target_rate_hz(s: Scenario) -> f64 {
    match s {
        Scenario::Short => 0.039,
        Scenario::Long => 0.011,
    }
}

/// Measured ion-ion fidelity of each scenario.
pub fn target_fidelity(s: Scenario) -> f64 {
    match s {
        Scenario::Short => 0.954,
        Scenario::Long => 0.959,
    }
}

/// Budget inputs that reproduce the rows of `s` exactly.
pub fn budget_params(s: Scenario) -> ErrorBudgetParams {
    let r = budget_rows_percent(s).map(|x| x / 100.0);
    ErrorBudgetParams {
        p_sc: p_sc_for_infidelity(r[0]),
        sigma_phi: sigma_phi_for_infidelity(r[1]),
        lamb_dicke: LAMB_DICKE,
        nbar: nbar_for_infidelity(LAMB_DICKE, r[2]),
        laser_coherence_ms: LASER_COHERENCE_MS,
        laser_exposure_ms: exposure_for_infidelity(r[3], LASER_COHERENCE_MS),
        dephasing: r[4],
        polarization_mixing: r[5],
        dark_count: r[6],
        mode_mismatch: r[7],
        misc: r[8],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "20m")]
    Short,
    #[serde(rename = "1.2km")]
    Long,
    #[serde(rename = "custom")]
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Short => "20m",
            Preset::Long => "1.2km",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "20m" => Some(Preset::Short),
            "1.2km" => Some(Preset::Long),
            "custom" => Some(Preset::Custom),
            _ => None,
        }
    }

    pub fn scenario(self) -> Option<Scenario> {
        match self {
            Preset::Short => Some(Scenario::Short),
            Preset::Long => Some(Scenario::Long),
            Preset::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonPhotonSettings {
    /// Shots per tomography basis.
    pub shots: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceSettings {
    pub model: CoherenceModel,
    /// T₂ of the synthetic data, ms.
    pub t2_ms: f64,
    pub delays_ms: Vec<f64>,
    /// Standard deviation of the fidelity noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    /// Detection time of the scanned photon, ns.
    pub t_ns: f64,
    /// Excitation time, ns.
    pub tau_ns: f64,
    pub visibility: f64,
    pub points: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Preset,
    pub seed: u64,
    pub timing: TimingConfig,
    pub emission: EmissionParams,
    pub beamsplitter: BeamsplitterModel,
    pub phase: PhaseParams,
    pub link: LinkConfig,
    pub budget: ErrorBudgetParams,
    pub ion_photon: IonPhotonSettings,
    pub coherence: CoherenceSettings,
    pub scan: ScanSettings,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Custom => Self::custom(),
            Preset::Short => Self::scenario_preset(Scenario::Short),
            Preset::Long => Self::scenario_preset(Scenario::Long),
        }
    }

    /// Noise-free base of the `custom` preset.
    fn custom() -> Self {
        Self {
            scenario: Preset::Custom,
            seed: 1,
            timing: TimingConfig::default(),
            emission: EmissionParams { pump_survival: PUMP_SURVIVAL, ..EmissionParams::default() },
            beamsplitter: BeamsplitterModel::balanced(),
            phase: PhaseParams::default(),
            link: LinkConfig::default(),
            budget: ErrorBudgetParams { lamb_dicke: LAMB_DICKE, laser_coherence_ms: LASER_COHERENCE_MS, ..ErrorBudgetParams::zero() },
            ion_photon: IonPhotonSettings { shots: 2000 },
            coherence: CoherenceSettings {
                model: CoherenceModel::Exponential,
                t2_ms: 351.0,
                delays_ms: (0..=12).map(|i| 50.0 * i as f64).collect(),
                noise: 0.015,
            },
            scan: ScanSettings { t_ns: 6045.0, tau_ns: 1000.0, visibility: 0.9, points: 24, noise: 0.02 },
        }
    }

    fn scenario_preset(s: Scenario) -> Self {
        let mut c = Self::custom();
        let cal = match s {
            Scenario::Short => CALIBRATION_20M,
            Scenario::Long => CALIBRATION_1200M,
        };
        c.scenario = match s {
            Scenario::Short => Preset::Short,
            Scenario::Long => Preset::Long,
        };
        c.timing = match s {
            Scenario::Short => TimingConfig { rounds_per_block: 300, modes_per_round: 1, fiber_m: 10.0, ..TimingConfig::default() },
            Scenario::Long => TimingConfig { rounds_per_block: 30, modes_per_round: 10, fiber_m: 600.0, ..TimingConfig::default() },
        };
        c.emission = EmissionParams {
            collection_efficiency: cal.collection_efficiency,
            pump_survival: PUMP_SURVIVAL,
            recoil_per_scatter: cal.recoil_per_scatter,
            nbar_floor: 0.0,
            prep_scatters: PREP_SCATTERS,
            ..EmissionParams::default()
        };
        c.beamsplitter = BeamsplitterModel::measured_normalized();
        c.budget = budget_params(s);
        c.phase = scenario_phase(&c.timing, &c.budget);
        c.link = LinkConfig { dark_rate_hz: cal.dark_rate_hz, ..LinkConfig::default() };
        c
    }

    pub fn is_calibrated(&self) -> bool {
        self.scenario != Preset::Custom
    }

    /// Memory noise implied by the budget inputs.
    pub fn link_noise(&self) -> LinkNoise {
        let b = &self.budget;
        let eps = b.dephasing + crate::analysis::laser_infidelity(b.laser_exposure_ms, b.laser_coherence_ms) + b.misc;
        LinkNoise { p_sc: b.p_sc, sigma_phi: b.sigma_phi, phase_flip: phase_flip_for_infidelity(eps), lamb_dicke: b.lamb_dicke }
    }

    /// Splitter, mode overlap and polarization rotation implied by the budget inputs.
    pub fn interference_setup(&self) -> InterferenceSetup {
        let b = &self.budget;
        let theta = 0.5 * b.polarization_mixing.min(1.0).sqrt().asin();
        InterferenceSetup { bs: self.beamsplitter, overlap: (1.0 - 2.0 * b.mode_mismatch).max(0.0), pol_rotation: [theta; 2] }
    }

    pub fn link_model(&self) -> Result<LinkModel, ConfigError> {
        LinkModel::new(self.timing.clone(), self.emission.clone(), self.phase, self.interference_setup(), &self.link, self.link_noise())
            .map_err(|f| ConfigError::Invalid { key: f.field.to_string(), line: None, message: f.message })
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid { key: key.to_string(), line: None, message };
        self.budget.validate().map_err(|m| invalid("budget", m))?;
        self.link_model()?;
        if self.ion_photon.shots == 0 {
            return Err(invalid("shots", "must be positive".into()));
        }
        let c = &self.coherence;
        if !(c.t2_ms > 0.0) || !(c.noise >= 0.0) {
            return Err(invalid("coherence", "t2_ms must be positive and noise non-negative".into()));
        }
        if c.delays_ms.windows(2).any(|w| w[1] <= w[0]) || c.delays_ms.iter().any(|d| !(*d >= 0.0)) {
            return Err(invalid("delays_ms", "delays must be non-negative and increasing".into()));
        }
        let s = &self.scan;
        if s.points < 4 || !(0.0..=1.0).contains(&s.visibility) || !(s.noise >= 0.0) || !(s.t_ns >= s.tau_ns) {
            return Err(invalid("scan", "need points >= 4, visibility in [0, 1], noise >= 0 and t_ns >= tau_ns".into()));
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("json value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }

    pub fn digest_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    /// Digest with `modes_per_round` removed, shared by the campaigns of one mode sweep.
    pub fn sweep_key(&self) -> String {
        let mut c = self.clone();
        c.timing.modes_per_round = 0;
        c.digest()
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to toml")
    }
}

/// Z-flip probability per qubit whose Bell-state infidelity 2p(1 − p) is `eps`.
pub fn phase_flip_for_infidelity(eps: f64) -> f64 {
    (1.0 - (1.0 - 2.0 * eps.min(0.5)).sqrt()) / 2.0
}

/// Phase-model parameters of a scenario. The merge splitting is chosen so the
/// merge timing jitter reproduces the budget's σ_φ.
fn scenario_phase(t: &TimingConfig, b: &ErrorBudgetParams) -> PhaseParams {
    use std::f64::consts::PI;
    let omega_12 = b.sigma_phi / MERGE_TIMING_JITTER_NS;
    PhaseParams {
        delta_omega_e0: 2.0 * PI * 2e-7,
        delta_k_0: 2.0 * PI * 1e-5,
        delta_k_1: 2.0 * PI * 1e-5,
        kbar_10: 2.0 * PI / 43.0,
        omega_12_a: omega_12,
        omega_12_b: omega_12,
        z0_a: t.fiber_m,
        z0_b: t.fiber_m,
        z_h: 1.0,
        z_v: 2.0,
        light_speed: t.fiber_speed_m_per_ns,
        ..PhaseParams::default()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("{}{key}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { key: String, line: Option<usize>, message: String },
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Syntax { line, .. } | ConfigError::UnknownKey { line, .. } => Some(*line),
            ConfigError::Invalid { line, .. } => *line,
        }
    }
}

/// A merged configuration and the keys the user file set.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Dotted keys set by the file, with their values as TOML text.
    pub overrides: BTreeMap<String, String>,
    pub source: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn from_preset(p: Preset) -> Self {
        Self { config: ExperimentConfig::preset(p), overrides: BTreeMap::new(), source: None }
    }
}

pub fn load_file(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let mut loaded = parse_config(&text)?;
    loaded.source = Some(path.to_path_buf());
    Ok(loaded)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

/// Line of each dotted key in the document.
fn key_lines(text: &str) -> BTreeMap<String, usize> {
    fn walk(t: &toml::de::DeTable<'_>, prefix: &str, text: &str, out: &mut BTreeMap<String, usize>) {
        for (k, v) in t.iter() {
            let key = if prefix.is_empty() { k.get_ref().to_string() } else { format!("{prefix}.{}", k.get_ref()) };
            out.insert(key.clone(), line_col(text, k.span().start).0);
            if let toml::de::DeValue::Table(inner) = v.get_ref() {
                walk(inner, &key, text, out);
            }
        }
    }
    let mut out = BTreeMap::new();
    if let Ok(doc) = toml::de::DeTable::parse(text) {
        walk(doc.get_ref(), "", text, &mut out);
    }
    out
}

/// Parses a config document: preset first, then the document's overrides.
pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let user: toml::Table = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((1, 1));
        ConfigError::Syntax { line, column, message: e.message().trim().to_string() }
    })?;
    let lines = key_lines(text);
    let line_of = |key: &str| lines.get(key).copied().unwrap_or(1);

    let preset = match user.get("scenario") {
        None => Preset::Custom,
        Some(toml::Value::String(s)) => Preset::parse(s).ok_or_else(|| ConfigError::Invalid {
            key: "scenario".into(),
            line: Some(line_of("scenario")),
            message: format!("`{s}` is not one of 20m, 1.2km, custom"),
        })?,
        Some(_) => {
            return Err(ConfigError::Invalid { key: "scenario".into(), line: Some(line_of("scenario")), message: "must be a string".into() });
        }
    };
    let base = ExperimentConfig::preset(preset).to_table();

    // flatten the overrides and check each against the preset's shape
    let mut leaves: Vec<(Vec<String>, toml::Value)> = Vec::new();
    fn flatten(t: &toml::Table, path: &mut Vec<String>, out: &mut Vec<(Vec<String>, toml::Value)>) {
        for (k, v) in t {
            path.push(k.clone());
            match v {
                toml::Value::Table(inner) => flatten(inner, path, out),
                other => out.push((path.clone(), other.clone())),
            }
            path.pop();
        }
    }
    flatten(&user, &mut Vec::new(), &mut leaves);

    let mut merged = base.clone();
    let mut overrides = BTreeMap::new();
    for (path, value) in leaves {
        let dotted = path.join(".");
        if !has_path(&base, &path) {
            // report the first unknown segment
            let mut prefix = Vec::new();
            for seg in &path {
                prefix.push(seg.clone());
                if !has_path(&base, &prefix) {
                    break;
                }
            }
            let key = prefix.join(".");
            return Err(ConfigError::UnknownKey { line: line_of(&key), key });
        }
        let mut trial = base.clone();
        set_path(&mut trial, &path, value.clone());
        if let Err(e) = toml::Value::Table(trial).try_into::<ExperimentConfig>() {
            return Err(ConfigError::Invalid { key: dotted.clone(), line: Some(line_of(&dotted)), message: e.message().trim().to_string() });
        }
        set_path(&mut merged, &path, value.clone());
        overrides.insert(dotted, value.to_string());
    }
    let config: ExperimentConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid { key: "config".into(), line: None, message: e.message().trim().to_string() })?;
    config.validate().map_err(|e| attach_line(e, &lines))?;
    Ok(LoadedConfig { config, overrides, source: None })
}

fn attach_line(e: ConfigError, lines: &BTreeMap<String, usize>) -> ConfigError {
    match e {
        ConfigError::Invalid { key, line: None, message } => {
            let line = lines.iter().find(|(k, _)| k.as_str() == key || k.ends_with(&format!(".{key}"))).map(|(_, l)| *l);
            ConfigError::Invalid { key, line, message }
        }
        other => other,
    }
}

fn has_path(t: &toml::Table, path: &[String]) -> bool {
    let mut cur = t;
    for (i, seg) in path.iter().enumerate() {
        match cur.get(seg) {
            Some(toml::Value::Table(inner)) => cur = inner,
            Some(_) => return i + 1 == path.len(),
            None => return false,
        }
    }
    true
}

fn set_path(t: &mut toml::Table, path: &[String], value: toml::Value) {
    let (last, head) = path.split_last().expect("non-empty path");
    let mut cur = t;
    for seg in head {
        cur = cur.get_mut(seg).and_then(|v| v.as_table_mut()).expect("checked path");
    }
    cur.insert(last.clone(), value);
}

/// Full config as a TOML document, suitable as a starting point for overrides.
pub fn to_toml_string(c: &ExperimentConfig) -> String {
    toml::to_string_pretty(c).expect("config serializes to toml")
}

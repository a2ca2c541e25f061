//! Run configuration: built-in defaults, TOML layers on top, then flags.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use perimeter_core::ctrl::{PiParams, RateBounds};
use perimeter_core::demand::DemandProfile;
use perimeter_core::net::GridSpec;
use perimeter_core::ppo::{PpoConfig, StateVariant};
use perimeter_core::scenario::Scenario;
use perimeter_core::sim::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Npc,
    Pi,
    Fixed,
    Ppo,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Npc => "npc",
            ControllerKind::Pi => "pi",
            ControllerKind::Fixed => "fixed",
            ControllerKind::Ppo => "ppo",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "npc" => Ok(ControllerKind::Npc),
            "pi" => Ok(ControllerKind::Pi),
            "fixed" => Ok(ControllerKind::Fixed),
            "ppo" => Ok(ControllerKind::Ppo),
            other => Err(CliError::Config(format!(
                "controller: unknown controller '{other}' (expected npc, pi, fixed or ppo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    pub peakedness: f64,
    pub total_endogenous: u64,
    pub total_exogenous: u64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        let d = DemandProfile::default();
        DemandConfig {
            peakedness: d.peakedness,
            total_endogenous: d.total_endogenous,
            total_exogenous: d.total_exogenous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Control cycle, seconds.
    pub cycle: f64,
    pub max_time_factor: f64,
    pub grid: GridSpec,
    pub demand: DemandConfig,
    pub sim: SimConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = Scenario::default();
        ScenarioConfig {
            cycle: s.cycle,
            max_time_factor: s.max_time_factor,
            grid: s.grid,
            demand: DemandConfig::default(),
            sim: s.sim,
        }
    }
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<Scenario, CliError> {
        let d = &self.demand;
        let demand = DemandProfile::new(d.peakedness, d.total_endogenous, d.total_exogenous)
            .map_err(|e| CliError::Config(format!("scenario.demand.peakedness: {e}")))?;
        if !(self.cycle > 0.0) {
            return Err(CliError::Config("scenario.cycle: must be > 0".into()));
        }
        if !(self.max_time_factor >= 1.0) {
            return Err(CliError::Config("scenario.max_time_factor: must be >= 1".into()));
        }
        Ok(Scenario {
            grid: self.grid,
            demand,
            sim: self.sim,
            cycle: self.cycle,
            max_time_factor: self.max_time_factor,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiConfig {
    pub kp: f64,
    pub ki: f64,
    /// Target protected accumulation, vehicles.
    pub set_point: f64,
}

impl Default for PiConfig {
    fn default() -> Self {
        let p = PiParams::default();
        PiConfig {
            kp: p.kp,
            ki: p.ki,
            set_point: p.set_point,
        }
    }
}

impl PiConfig {
    pub fn params(&self, bounds: RateBounds) -> PiParams {
        PiParams {
            kp: self.kp,
            ki: self.ki,
            set_point: self.set_point,
            bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// MFD aggregation window, seconds.
    pub mfd_window: f64,
    /// Density bin for the loading/unloading comparison, veh/lane-km.
    pub hysteresis_bin: f64,
    /// Points on the policy sweep between zero and the density scale.
    pub grid_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            mfd_window: 288.0,
            hysteresis_bin: 5.0,
            grid_points: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub controllers: Vec<ControllerKind>,
    pub state_design: StateVariant,
    /// Policy file for `ppo` rows; `<out>/policy.json` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Per-meter rate of the `fixed` controller, veh/h.
    pub fixed_rate: f64,
    pub train_seed: u64,
    pub init_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    /// Checkpoint after this many training batches.
    pub checkpoint_every: usize,
    pub scenario: ScenarioConfig,
    pub pi: PiConfig,
    pub ppo: PpoConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: (1..=10).collect(),
            out: PathBuf::from("out"),
            controllers: vec![ControllerKind::Npc, ControllerKind::Pi],
            state_design: StateVariant::D6,
            policy: None,
            fixed_rate: 200.0,
            train_seed: 1,
            init_seed: 1,
            jobs: 0,
            checkpoint_every: 1,
            scenario: ScenarioConfig::default(),
            pi: PiConfig::default(),
            ppo: PpoConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Keys a layer may set even though the defaults leave them out.
const OPTIONAL_KEYS: &[&str] = &["policy"];

fn key_paths(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(t) = v {
            key_paths(t, &path, out);
        }
        out.insert(path);
    }
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::layered(&[text])
    }

    /// Applies each TOML layer over the defaults in order. Keys unknown to
    /// the defaults are rejected by their dotted path.
    pub fn layered(layers: &[&str]) -> Result<Self, CliError> {
        let mut base: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        let mut known = BTreeSet::new();
        key_paths(&base, "", &mut known);
        known.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        for text in layers {
            let layer: toml::Table =
                toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?;
            let mut keys = BTreeSet::new();
            key_paths(&layer, "", &mut keys);
            if let Some(bad) = keys.iter().find(|k| !known.contains(*k)) {
                return Err(CliError::Config(format!("{bad}: unknown field")));
            }
            merge(&mut base, layer);
        }
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(paths: &[PathBuf]) -> Result<Self, CliError> {
        let texts = paths
            .iter()
            .map(|p| {
                std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("--config {}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        Self::layered(&refs)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: must not be empty".into()));
        }
        if self.controllers.is_empty() {
            return Err(CliError::Config("controllers: must not be empty".into()));
        }
        if !(self.fixed_rate > 0.0) {
            return Err(CliError::Config("fixed_rate: must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every: must be >= 1".into()));
        }
        let p = &self.ppo;
        if p.batch_episodes == 0 || p.minibatch == 0 || p.epochs == 0 {
            return Err(CliError::Config(
                "ppo: batch_episodes, minibatch and epochs must be >= 1".into(),
            ));
        }
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            return Err(CliError::Config(format!("ppo.gamma: must be in (0, 1], got {}", p.gamma)));
        }
        if !(p.lambda >= 0.0 && p.lambda <= 1.0) {
            return Err(CliError::Config("ppo.lambda: must be in [0, 1]".into()));
        }
        if !(p.lr > 0.0) || !(p.clip > 0.0) || !(p.reward_scale > 0.0) {
            return Err(CliError::Config("ppo: lr, clip and reward_scale must be > 0".into()));
        }
        if p.hidden.is_empty() || p.hidden.contains(&0) {
            return Err(CliError::Config("ppo.hidden: layer sizes must be >= 1".into()));
        }
        if !(self.analysis.mfd_window > 0.0) || !(self.analysis.hysteresis_bin > 0.0) {
            return Err(CliError::Config("analysis: mfd_window and hysteresis_bin must be > 0".into()));
        }
        if self.analysis.grid_points < 2 {
            return Err(CliError::Config("analysis.grid_points: must be >= 2".into()));
        }
        self.scenario.build()?;
        Ok(())
    }

    /// Hash of everything that affects results. Output location and
    /// scheduling knobs are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.jobs = 0;
        c.checkpoint_every = 1;
        digest(&c.to_toml())
    }

    /// Hash of the inputs that determine a training run.
    pub fn training_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            train_seed: u64,
            init_seed: u64,
            state_design: StateVariant,
            scenario: &'a ScenarioConfig,
            ppo: &'a PpoConfig,
        }
        let key = Key {
            train_seed: self.train_seed,
            init_seed: self.init_seed,
            state_design: self.state_design,
            scenario: &self.scenario,
            ppo: &self.ppo,
        };
        digest(&toml::to_string(&key).expect("training key serializes"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.policy.clone().unwrap_or_else(|| self.out.join("policy.json"))
    }

    pub fn out_path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    pub fn scale_demand(&mut self, factor: f64) -> Result<(), CliError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(CliError::Config(format!("scale: must be > 0, got {factor}")));
        }
        let d = &mut self.scenario.demand;
        d.total_endogenous = (d.total_endogenous as f64 * factor).round() as u64;
        d.total_exogenous = (d.total_exogenous as f64 * factor).round() as u64;
        Ok(())
    }
}

fn digest(text: &str) -> String {
    let bytes = Sha256::digest(text.as_bytes());
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parses `1-10`, `1,3,5` or a mix such as `1-3,7`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("seed-list: cannot parse '{s}'"));
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Config("seed-list: must not be empty".into()));
    }
    Ok(seeds)
}

pub fn parse_controllers(s: &str) -> Result<Vec<ControllerKind>, CliError> {
    let list = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(ControllerKind::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    if list.is_empty() {
        return Err(CliError::Config("controller: must not be empty".into()));
    }
    Ok(list)
}

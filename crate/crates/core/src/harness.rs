//! Experiment orchestration behind the `avguard` CLI.
//!
//! Every command rebuilds the data and controllers it needs from the config
//! (training is deterministic and takes seconds), writes its artifacts into
//! `<out>/<command>/` and records them in that directory's `manifest.toml`.
//! Commands that consume another command's result (`defend` and `baselines`
//! need x* from `learn-noise`) read it from the sibling directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::controller::{
    generate_dataset, poison_dataset, teacher_queries, train_net, verify_backdoor, BackdoorReport, ControllerNet, Dataset,
    TeacherParams, TrainHyper, TriggerSpec,
};
use crate::density::{
    defender_probes, eval_candidate, eval_many, final_fit, learn_loop, parameter_box, uniform_candidates, write_pool_csv,
    EvalEnv, Evaluation, FitHyper, LearnConfig,
};
use crate::error::{Error, Result};
use crate::fmt::{exact, g6};
use crate::metrics::{self, write_metrics_csv};
use crate::rng;
use crate::sampler::{sample_optimal, SamplerConfig};
use crate::sim::{self, equilibrium_speed, IdmPolicy, Observation, Scenario, SimConfig, StagedEncounter, TrajectoryRecord};
use crate::smoothing::{compute_scales, NoiseParams, SmoothedController};
use crate::svg::{self, Series};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Named seeds; each stochastic component draws from exactly one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Initial perturbation of the baseline and demo episodes.
    pub sim: u64,
    pub dataset: u64,
    pub queries: u64,
    pub split: u64,
    pub benign_init: u64,
    pub poison: u64,
    pub adv_init: u64,
    pub verify: u64,
    pub probes: u64,
    /// Evaluation episodes of the noise search.
    pub episode: u64,
    pub smoothing: u64,
    pub learn: u64,
    pub fit: u64,
    pub sampler: u64,
    pub uniform: u64,
    /// Encounter jitter and episode seeds of the closed-loop defense runs.
    pub defend: u64,
    pub defend_smoothing: u64,
    pub offline: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            sim: 0,
            dataset: 7,
            queries: 8,
            split: 3,
            benign_init: 11,
            poison: 5,
            adv_init: 11,
            verify: 9,
            probes: 4,
            episode: 31,
            smoothing: 37,
            learn: 23,
            fit: 17,
            sampler: 5,
            uniform: 999,
            defend: 8,
            defend_smoothing: 4,
            offline: 3,
        }
    }
}

impl Seeds {
    pub const NAMES: [&'static str; 18] = [
        "sim",
        "dataset",
        "queries",
        "split",
        "benign_init",
        "poison",
        "adv_init",
        "verify",
        "probes",
        "episode",
        "smoothing",
        "learn",
        "fit",
        "sampler",
        "uniform",
        "defend",
        "defend_smoothing",
        "offline",
    ];

    pub fn get_mut(&mut self, name: &str) -> Option<&mut u64> {
        Some(match name {
            "sim" => &mut self.sim,
            "dataset" => &mut self.dataset,
            "queries" => &mut self.queries,
            "split" => &mut self.split,
            "benign_init" => &mut self.benign_init,
            "poison" => &mut self.poison,
            "adv_init" => &mut self.adv_init,
            "verify" => &mut self.verify,
            "probes" => &mut self.probes,
            "episode" => &mut self.episode,
            "smoothing" => &mut self.smoothing,
            "learn" => &mut self.learn,
            "fit" => &mut self.fit,
            "sampler" => &mut self.sampler,
            "uniform" => &mut self.uniform,
            "defend" => &mut self.defend,
            "defend_smoothing" => &mut self.defend_smoothing,
            "offline" => &mut self.offline,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Teacher-driven ring episodes recorded as genuine data.
    pub episodes: usize,
    /// Extra teacher labels at uniform points of the query box.
    pub queries: usize,
    pub query_lower: [f64; 3],
    pub query_upper: [f64; 3],
    pub test_frac: f64,
    /// Trigger rows added, as a fraction of the training split.
    pub poison_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 8,
            queries: 20_000,
            query_lower: [0.0, 0.0, 0.1],
            query_upper: [6.0, 6.0, 20.0],
            test_frac: 0.1,
            poison_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self { hidden: h.hidden, learning_rate: h.learning_rate, epochs: h.epochs, batch_size: h.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub eps_tol: f64,
    pub prob_tol: f64,
    pub n_probe: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { eps_tol: 0.15, prob_tol: 0.05, n_probe: 500 }
    }
}

/// Staged trigger encounters: the AV meets its leader at the trigger
/// center and the leader holds its speed for `hold` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncounterSection {
    /// Time of the encounter in the noise-search episodes.
    pub eval_time: f64,
    /// Time of the encounter in the attack-demo episodes.
    pub demo_time: f64,
    pub hold: f64,
}

impl Default for EncounterSection {
    fn default() -> Self {
        Self { eval_time: 300.0, demo_time: 200.0, hold: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingSection {
    /// Monte-Carlo draws per action in closed loop and in the search.
    pub n_mc: usize,
    /// Draws per probe in the offline acceleration comparison.
    pub offline_n_mc: usize,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        Self { n_mc: 100, offline_n_mc: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_clean: usize,
    pub n_trigger: usize,
    /// Defender's trigger spread relative to the attacker's.
    pub defender_factor: f64,
    /// Trailing window for the stability metric (s).
    pub window: f64,
    pub n_rep: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { n_clean: 200, n_trigger: 100, defender_factor: 2.0, window: 200.0, n_rep: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_frac: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let h = FitHyper::default();
        Self {
            hidden: h.hidden,
            lambda: h.lambda,
            epochs: h.epochs,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            holdout_frac: h.holdout_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub rounds: usize,
    pub batch: usize,
    pub explore_attempts: u64,
    pub fit: FitSection,
    /// Sampler settings for the per-round exploitation runs.
    pub sampler: SamplerConfig,
}

impl Default for LearnSection {
    fn default() -> Self {
        let l = LearnConfig::default();
        Self { rounds: l.rounds, batch: l.batch, explore_attempts: l.explore_attempts, fit: FitSection::default(), sampler: l.sampler }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesSection {
    pub n_uniform: usize,
    pub iso_start: f64,
    pub iso_step: f64,
    pub iso_points: usize,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self { n_uniform: 100, iso_start: 0.1, iso_step: 0.05, iso_points: 9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefendSection {
    pub episodes: usize,
    /// Encounter time of the first episode; later ones are `spacing` apart.
    pub start: f64,
    pub spacing: f64,
    pub n_genuine: usize,
    pub n_trigger: usize,
}

impl Default for DefendSection {
    fn default() -> Self {
        Self { episodes: 20, start: 200.0, spacing: 5.0, n_genuine: 200, n_trigger: 500 }
    }
}

/// Pass thresholds of the checks each command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    /// Minimum pooled speed std over the no-AV episode's final third.
    pub min_wave_std: f64,
    /// Maximum cross-vehicle speed std over the last `settle_window` s.
    pub max_cross_std: f64,
    pub settle_window: f64,
    /// Allowed relative deviation of the mean speed from equilibrium.
    pub speed_tol: f64,
    pub min_raw_crashes: usize,
    pub max_smoothed_crashes: usize,
    /// Smoothed trigger acceleration must stay below this fraction of the
    /// attacker's target.
    pub trigger_reduction: f64,
    pub max_genuine_dev: f64,
    pub min_anisotropy: f64,
    /// Allowed relative shortfall of the 6-dim best ratio below the 3-dim one.
    pub means_tolerance: f64,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            min_wave_std: 0.5,
            max_cross_std: 0.3,
            settle_window: 100.0,
            speed_tol: 0.3,
            min_raw_crashes: 18,
            max_smoothed_crashes: 0,
            trigger_reduction: 0.5,
            max_genuine_dev: 0.15,
            min_anisotropy: 2.0,
            means_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Worker threads for candidate evaluation; outputs do not depend on it.
    pub threads: usize,
    pub seeds: Seeds,
    pub sim: SimConfig,
    pub teacher: TeacherParams,
    pub data: DataSection,
    pub controller: ControllerSection,
    pub trigger: TriggerSpec,
    pub attack: AttackSection,
    pub encounter: EncounterSection,
    pub smoothing: SmoothingSection,
    pub metrics: MetricsSection,
    pub learn: LearnSection,
    /// Sampler settings for the final draw of x*.
    pub sampler: SamplerConfig,
    pub baselines: BaselinesSection,
    pub defend: DefendSection,
    pub checks: ChecksSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            threads: 1,
            seeds: Seeds::default(),
            sim: SimConfig::default(),
            teacher: TeacherParams::default(),
            data: DataSection::default(),
            controller: ControllerSection::default(),
            trigger: TriggerSpec::default(),
            attack: AttackSection::default(),
            encounter: EncounterSection::default(),
            smoothing: SmoothingSection::default(),
            metrics: MetricsSection::default(),
            learn: LearnSection::default(),
            sampler: SamplerConfig::default(),
            baselines: BaselinesSection::default(),
            defend: DefendSection::default(),
            checks: ChecksSection::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and misplaced seeds are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let sim_seed_given = raw.get("sim").and_then(|s| s.get("seed")).is_some();
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if sim_seed_given && cfg.sim.seed != cfg.seeds.sim {
            return Err(Error::Config("[sim] seed disagrees with [seeds] sim; set only [seeds] sim".into()));
        }
        cfg.sim.seed = cfg.seeds.sim;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies `name=value` to the named seed.
    pub fn apply_seed_override(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("seed override '{spec}' is not of the form name=u64")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("seed override '{spec}': '{value}' is not a u64")))?;
        let slot = self.seeds.get_mut(name.trim()).ok_or_else(|| {
            Error::Config(format!("unknown seed '{}'; known seeds: {}", name.trim(), Seeds::NAMES.join(", ")))
        })?;
        *slot = value;
        self.sim.seed = self.seeds.sim;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.trigger.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.data.episodes == 0 {
            return Err(Error::Config("data.episodes must be >= 1".into()));
        }
        if (0..3).any(|d| !(self.data.query_lower[d] < self.data.query_upper[d])) {
            return Err(Error::Config("data.query_lower must lie below data.query_upper".into()));
        }
        fraction("data.test_frac", self.data.test_frac)?;
        fraction("data.poison_frac", self.data.poison_frac)?;
        if self.controller.hidden.is_empty() || self.controller.hidden.contains(&0) {
            return Err(Error::Config("controller.hidden needs at least one nonzero layer".into()));
        }
        positive("controller.learning_rate", self.controller.learning_rate)?;
        positive("attack.eps_tol", self.attack.eps_tol)?;
        fraction("attack.prob_tol", self.attack.prob_tol)?;
        for (name, t) in [("encounter.eval_time", self.encounter.eval_time), ("encounter.demo_time", self.encounter.demo_time)] {
            if !(t >= self.sim.av_activation_time && t < self.sim.horizon) {
                return Err(Error::Config(format!("{name} = {t} must lie in [av_activation_time, horizon)")));
            }
        }
        positive("encounter.hold", self.encounter.hold)?;
        if self.smoothing.n_mc == 0 || self.smoothing.offline_n_mc == 0 {
            return Err(Error::Config("smoothing draw counts must be >= 1".into()));
        }
        positive("metrics.defender_factor", self.metrics.defender_factor)?;
        if !(self.metrics.window > 0.0 && self.metrics.window <= self.sim.horizon) {
            return Err(Error::Config(format!("metrics.window must lie in (0, horizon], got {}", self.metrics.window)));
        }
        if self.learn.rounds == 0 || self.learn.batch < 2 {
            return Err(Error::Config("learn needs rounds >= 1 and batch >= 2".into()));
        }
        fraction("learn.fit.holdout_frac", self.learn.fit.holdout_frac)?;
        for (name, s) in [("learn.sampler", &self.learn.sampler), ("sampler", &self.sampler)] {
            if !(s.a_terminal > 0.0 && s.a_terminal < 1.0) || s.safety < 1.0 || s.n_grid < 1000 {
                return Err(Error::Config(format!("{name} needs a_terminal in (0, 1), safety >= 1 and n_grid >= 1000")));
            }
        }
        if self.baselines.iso_points == 0 {
            return Err(Error::Config("baselines.iso_points must be >= 1".into()));
        }
        let last_iso = self.baselines.iso_start + self.baselines.iso_step * (self.baselines.iso_points - 1) as f64;
        if !(self.baselines.iso_start >= 0.0 && last_iso <= 1.0) {
            return Err(Error::Config("isotropic scan leaves the unit box".into()));
        }
        let last = self.defend.start + self.defend.spacing * self.defend.episodes.saturating_sub(1) as f64;
        if self.defend.start < self.sim.av_activation_time || last >= self.sim.horizon {
            return Err(Error::Config("defense encounters must fall between AV activation and the horizon".into()));
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { seed: self.seeds.sim, ..self.sim.clone() }
    }

    pub fn train_hyper(&self, seed: u64) -> TrainHyper {
        let c = &self.controller;
        TrainHyper { hidden: c.hidden.clone(), learning_rate: c.learning_rate, epochs: c.epochs, batch_size: c.batch_size, seed }
    }

    pub fn learn_config(&self, dim: usize) -> LearnConfig {
        let f = &self.learn.fit;
        LearnConfig {
            dim,
            rounds: self.learn.rounds,
            batch: self.learn.batch,
            fit: FitHyper {
                hidden: f.hidden.clone(),
                lambda: f.lambda,
                epochs: f.epochs,
                learning_rate: f.learning_rate,
                batch_size: f.batch_size,
                holdout_frac: f.holdout_frac,
                seed: self.seeds.fit,
            },
            sampler: self.learn.sampler,
            explore_attempts: self.learn.explore_attempts,
            threads: self.threads,
            seed: self.seeds.learn,
        }
    }

    fn trigger_encounter(&self, time: f64) -> StagedEncounter {
        let [av_speed, leader_speed, gap] = self.trigger.center;
        StagedEncounter { time, av_speed, leader_speed, gap, hold: self.encounter.hold }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    SimBaseline,
    InjectBackdoor,
    LearnNoise,
    Defend,
    Baselines,
    LearnNoiseWithMeans,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::SimBaseline,
        Command::InjectBackdoor,
        Command::LearnNoise,
        Command::Defend,
        Command::Baselines,
        Command::LearnNoiseWithMeans,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SimBaseline => "sim-baseline",
            Command::InjectBackdoor => "inject-backdoor",
            Command::LearnNoise => "learn-noise",
            Command::Defend => "defend",
            Command::Baselines => "baselines",
            Command::LearnNoiseWithMeans => "learn-noise-with-means",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Paths relative to the command directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
    pub checks: Vec<Check>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn files(&self) -> Vec<&str> {
        self.stages.iter().flat_map(|s| s.files.iter().map(String::as_str)).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct CommandReport {
    pub command: Command,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl CommandReport {
    pub fn checks(&self) -> &[Check] {
        &self.manifest.checks
    }

    pub fn passed(&self) -> bool {
        self.manifest.checks.iter().all(|c| c.passed)
    }
}

pub fn exit_code(result: &Result<CommandReport>) -> i32 {
    match result {
        Ok(r) if r.passed() => EXIT_OK,
        Ok(_) => EXIT_CHECK,
        Err(Error::Config(_) | Error::Parse(_)) => EXIT_CONFIG,
        Err(_) => EXIT_STAGE,
    }
}

/// Files written by one stage.
pub struct StageFiles<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl StageFiles<'_> {
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)?;
        Ok(buf)
    }
}

struct Run {
    command: Command,
    dir: PathBuf,
    stages: Vec<StageRecord>,
    checks: Vec<Check>,
}

impl Run {
    fn new(out: &Path, command: Command) -> Result<Self> {
        let dir = out.join(command.name());
        fs::create_dir_all(&dir)?;
        Ok(Self { command, dir, stages: Vec::new(), checks: Vec::new() })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut StageFiles) -> Result<T>) -> Result<T> {
        info!("[{}] {name}", self.command.name());
        let t = Instant::now();
        let mut files = StageFiles { dir: &self.dir, files: Vec::new() };
        let out = f(&mut files).map_err(|e| match e {
            Error::Config(_) | Error::Parse(_) | Error::Stage(_) => e,
            e => Error::Stage(format!("{} / {name}: {e}", self.command.name())),
        })?;
        let files = files.files;
        self.stages.push(StageRecord { name: name.to_string(), seconds: t.elapsed().as_secs_f64(), files });
        Ok(out)
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        if !passed {
            warn!("[{}] check failed: {name} ({detail})", self.command.name());
        }
        self.checks.push(Check::new(name, passed, detail));
    }

    fn finish(self, cfg: &ExperimentConfig) -> Result<CommandReport> {
        let mut seen = BTreeSet::new();
        for f in self.stages.iter().flat_map(|s| &s.files) {
            if !seen.insert(f.as_str()) {
                return Err(Error::Stage(format!("{} wrote {f} twice", self.command.name())));
            }
        }
        let manifest = RunManifest {
            command: self.command.name().to_string(),
            version: VERSION.to_string(),
            stages: self.stages,
            checks: self.checks,
            config: cfg.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Stage(format!("cannot serialize manifest: {e}")))?;
        fs::write(self.dir.join("manifest.toml"), text)?;
        Ok(CommandReport { command: self.command, dir: self.dir, manifest })
    }
}

/// Genuine data and both controllers, rebuilt deterministically from the
/// config.
#[derive(Debug, Clone)]
pub struct Models {
    /// Teacher episodes; the defender's notion of typical traffic.
    pub episodes: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub benign: ControllerNet,
    pub adv: ControllerNet,
    pub scales: [f64; 3],
}

/// Teacher episodes plus query rows, split into train and test.
pub fn genuine_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let s = &cfg.seeds;
    let episodes = generate_dataset(&cfg.sim_config(), &cfg.teacher, cfg.data.episodes, s.dataset)?;
    let queries = teacher_queries(&cfg.teacher, cfg.data.query_lower, cfg.data.query_upper, cfg.data.queries, s.queries);
    let mut all = episodes.clone();
    all.rows.extend(queries.rows);
    let (train, test) = all.split(cfg.data.test_frac, s.split);
    Ok((episodes, train, test))
}

pub fn poisoned_training_set(cfg: &ExperimentConfig, train: &Dataset) -> Dataset {
    let n_trig = (cfg.data.poison_frac * train.len() as f64) as usize;
    poison_dataset(train, &cfg.trigger, n_trig, cfg.seeds.poison)
}

pub fn build_models(cfg: &ExperimentConfig) -> Result<Models> {
    let (episodes, train, test) = genuine_data(cfg)?;
    let (benign, _) = train_net(&train, &cfg.train_hyper(cfg.seeds.benign_init))?;
    let (adv, _) = train_net(&poisoned_training_set(cfg, &train), &cfg.train_hyper(cfg.seeds.adv_init))?;
    let scales = compute_scales(&episodes)?;
    Ok(Models { episodes, train, test, benign, adv, scales })
}

/// The scoring environment of the noise search, around the backdoored net.
pub fn eval_env(cfg: &ExperimentConfig, m: &Models) -> Result<EvalEnv> {
    let mc = &cfg.metrics;
    let (clean_probes, trigger_probes) =
        defender_probes(&m.episodes, &cfg.trigger, mc.defender_factor, mc.n_clean, mc.n_trigger, cfg.seeds.probes)?;
    Ok(EvalEnv {
        net: m.adv.clone(),
        sim: cfg.sim.clone(),
        scales: m.scales,
        clean_probes,
        trigger_probes,
        encounter: cfg.trigger_encounter(cfg.encounter.eval_time),
        episode_seed: cfg.seeds.episode,
        smoothing_seed: cfg.seeds.smoothing,
        n_mc: cfg.smoothing.n_mc,
        window: mc.window,
        n_rep: mc.n_rep,
    })
}

/// Runs one command end to end.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<CommandReport> {
    cfg.validate()?;
    match command {
        Command::SimBaseline => cmd_sim_baseline(cfg),
        Command::InjectBackdoor => cmd_inject_backdoor(cfg),
        Command::LearnNoise => cmd_learn(cfg, Command::LearnNoise, 3),
        Command::Defend => cmd_defend(cfg),
        Command::Baselines => cmd_baselines(cfg),
        Command::LearnNoiseWithMeans => cmd_learn(cfg, Command::LearnNoiseWithMeans, 6),
        Command::Report => cmd_report(cfg),
    }
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Parse(format!("non-UTF-8 CSV: {e}")))
}

/// Stability of an episode: no crash, settled speeds, mean near equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleStats {
    pub cross_std: f64,
    pub mean_speed: f64,
    pub equilibrium: f64,
    pub crashed: bool,
}

impl SettleStats {
    pub fn measure(rec: &TrajectoryRecord, cfg: &ExperimentConfig) -> Result<Self> {
        let t1 = cfg.sim.horizon;
        let t0 = t1 - cfg.checks.settle_window;
        let cross_std = metrics::cross_vehicle_speed_std(rec, t0, t1)?;
        let (mean_speed, _) = metrics::pooled_speed_stats(rec, t0, t1)?;
        let s = &cfg.sim;
        let equilibrium = equilibrium_speed(&s.idm, s.track_length, s.n_vehicles, s.vehicle_length)?;
        Ok(Self { cross_std, mean_speed, equilibrium, crashed: rec.crashed() })
    }

    pub fn holds(&self, cfg: &ExperimentConfig) -> bool {
        !self.crashed
            && self.cross_std <= cfg.checks.max_cross_std
            && (self.mean_speed - self.equilibrium).abs() <= cfg.checks.speed_tol * self.equilibrium
    }

    fn describe(&self) -> String {
        format!(
            "cross-vehicle std {} m/s, mean {} m/s vs equilibrium {} m/s, crashed {}",
            g6(self.cross_std),
            g6(self.mean_speed),
            g6(self.equilibrium),
            self.crashed
        )
    }
}

fn cmd_sim_baseline(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut run = Run::new(&cfg.out_dir, Command::SimBaseline)?;
    let benign = run.stage("train-benign", |_| {
        let (_, train, _) = genuine_data(cfg)?;
        Ok(train_net(&train, &cfg.train_hyper(cfg.seeds.benign_init))?.0)
    })?;
    let sim = cfg.sim_config();
    let scenario = Scenario::from_config(&sim);
    let (no_av, with_av) = run.stage("episodes", |files| {
        let no_av = sim::run_episode(&sim, &IdmPolicy::from_config(&sim), &scenario)?;
        let with_av = sim::run_episode(&sim, &benign, &scenario)?;
        let a = files.write_with("trajectory_no_av.csv", |w| no_av.write_csv(w))?;
        let b = files.write_with("trajectory_benign.csv", |w| with_av.write_csv(w))?;
        files.write("speed_no_av.svg", render(Chart::SpeedProfile, "Speeds without an AV", utf8(&a)?)?)?;
        files.write("speed_benign.svg", render(Chart::SpeedProfile, "Speeds with the benign AV", utf8(&b)?)?)?;
        Ok((no_av, with_av))
    })?;
    let t1 = sim.horizon;
    let (_, wave_std) = metrics::pooled_speed_stats(&no_av, t1 * 2.0 / 3.0, t1)?;
    run.check(
        "no-AV stop-and-go waves",
        wave_std >= cfg.checks.min_wave_std && !no_av.crashed(),
        format!("speed std over final third {} m/s (need >= {})", g6(wave_std), cfg.checks.min_wave_std),
    );
    let settle = SettleStats::measure(&with_av, cfg)?;
    run.check("benign AV dissipates waves", settle.holds(cfg), settle.describe());
    run.finish(cfg)
}

fn cmd_inject_backdoor(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut run = Run::new(&cfg.out_dir, Command::InjectBackdoor)?;
    let (train, test) = run.stage("data", |files| {
        let (_, train, test) = genuine_data(cfg)?;
        let poisoned = poisoned_training_set(cfg, &train);
        files.write_with("training_set.csv", |w| poisoned.write_csv(w))?;
        Ok((train, test))
    })?;
    let (benign, adv) = run.stage("train", |files| {
        let (benign, rb) = train_net(&train, &cfg.train_hyper(cfg.seeds.benign_init))?;
        let (adv, ra) = train_net(&poisoned_training_set(cfg, &train), &cfg.train_hyper(cfg.seeds.adv_init))?;
        files.write_with("benign_weights.txt", |w| benign.save(w))?;
        files.write_with("adv_weights.txt", |w| adv.save(w))?;
        files.write_with("training_loss.csv", |w| {
            use std::io::Write;
            writeln!(w, "epoch,benign_loss,adv_loss")?;
            for (i, (b, a)) in rb.epoch_losses.iter().zip(&ra.epoch_losses).enumerate() {
                writeln!(w, "{i},{},{}", g6(*b), g6(*a))?;
            }
            Ok(())
        })?;
        Ok((benign, adv))
    })?;
    let a = &cfg.attack;
    let report = run.stage("verify", |files| {
        let r = verify_backdoor(&benign, &adv, &cfg.trigger, &test, a.eps_tol, a.prob_tol, a.n_probe, cfg.seeds.verify)?;
        files.write_with("backdoor_report.csv", |w| write_backdoor_report(w, &r))?;
        Ok(r)
    })?;
    let (adv_demo, benign_demo) = run.stage("attack-demo", |files| {
        let sim = cfg.sim_config();
        let scenario = Scenario::from_config(&sim).with_encounter(cfg.trigger_encounter(cfg.encounter.demo_time));
        let adv_demo = sim::run_episode(&sim, &adv, &scenario)?;
        let benign_demo = sim::run_episode(&sim, &benign, &scenario)?;
        let x = files.write_with("demo_adv.csv", |w| adv_demo.write_csv(w))?;
        let y = files.write_with("demo_benign.csv", |w| benign_demo.write_csv(w))?;
        files.write_with("demo_crashes.csv", |w| {
            use std::io::Write;
            writeln!(w, "controller,t,follower,leader")?;
            for (name, rec) in [("adv", &adv_demo), ("benign", &benign_demo)] {
                for c in &rec.crash_events {
                    writeln!(w, "{name},{},{},{}", g6(c.time), c.follower, c.leader)?;
                }
            }
            Ok(())
        })?;
        files.write("demo_adv.svg", render(Chart::SpeedProfile, "Attack demo, backdoored AV", utf8(&x)?)?)?;
        files.write("demo_benign.svg", render(Chart::SpeedProfile, "Attack demo, benign AV", utf8(&y)?)?)?;
        Ok((adv_demo, benign_demo))
    })?;
    run.check(
        "trigger success rate",
        report.success_rate >= 1.0 - a.prob_tol,
        format!("{} of trigger draws within {} of the target", g6(report.success_rate), a.eps_tol),
    );
    run.check(
        "genuine functionality",
        report.functionality_rate >= 1.0 - a.prob_tol,
        format!(
            "{} of held-out rows within {} of the benign net (mean deviation {})",
            g6(report.functionality_rate),
            a.eps_tol,
            g6(report.mean_genuine_deviation)
        ),
    );
    run.check(
        "attack demo crashes only the backdoored AV",
        adv_demo.crashed() && !benign_demo.crashed(),
        format!("backdoored crashed {}, benign crashed {}", adv_demo.crashed(), benign_demo.crashed()),
    );
    let probes: Vec<[f64; 3]> = test.rows.iter().take(200).map(|r| r.obs.to_array()).collect();
    let reloaded = fs::read(run.dir.join("adv_weights.txt")).map_err(Error::from).and_then(|b| ControllerNet::load(&b[..]))?;
    let same = reloaded.forward_batch(&probes).iter().zip(adv.forward_batch(&probes)).all(|(x, y)| x.to_bits() == y.to_bits());
    run.check("weights round-trip", same, "reloaded backdoored net reproduces outputs bit-exactly".into());
    run.finish(cfg)
}

fn write_backdoor_report(w: &mut Vec<u8>, r: &BackdoorReport) -> std::io::Result<()> {
    use std::io::Write;
    writeln!(w, "metric,value")?;
    for (k, v) in [
        ("success_rate", r.success_rate),
        ("functionality_rate", r.functionality_rate),
        ("mean_genuine_deviation", r.mean_genuine_deviation),
        ("eps_tol", r.eps_tol),
        ("prob_tol", r.prob_tol),
    ] {
        writeln!(w, "{k},{}", g6(v))?;
    }
    Ok(())
}

/// The chosen noise parameters and their evaluated ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct XStar {
    pub x: Vec<f64>,
    pub r: f64,
    pub source: String,
}

impl XStar {
    pub fn to_csv(&self) -> String {
        let mut head: Vec<String> = (1..=3).map(|i| format!("x{i}")).collect();
        head.extend((1..=self.x.len().saturating_sub(3)).map(|i| format!("m{i}")));
        head.extend(["r".to_string(), "source".to_string()]);
        let mut vals: Vec<String> = self.x.iter().map(|v| exact(*v)).collect();
        vals.extend([exact(self.r), self.source.clone()]);
        format!("{}\n{}\n", head.join(","), vals.join(","))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t = Table::parse(text)?;
        let row = match t.rows.as_slice() {
            [row] => row,
            _ => return Err(Error::Parse("x_star.csv must have exactly one data row".into())),
        };
        let r_col = t.col("r")?;
        let src = t.col("source")?;
        let x = row[..r_col].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
        if x.len() != 3 && x.len() != 6 {
            return Err(Error::Parse(format!("x_star.csv has {} parameters", x.len())));
        }
        Ok(Self { x, r: parse_f64(&row[r_col])?, source: row[src].clone() })
    }

    pub fn read(out: &Path, command: Command) -> Result<Self> {
        let path = out.join(command.name()).join("x_star.csv");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Stage(format!("cannot read {} ({e}); run `{}` first", path.display(), command.name())))?;
        Self::parse(&text)
    }
}

fn anisotropy(stds: &[f64]) -> f64 {
    let max = stds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = stds.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn cmd_learn(cfg: &ExperimentConfig, command: Command, dim: usize) -> Result<CommandReport> {
    let mut run = Run::new(&cfg.out_dir, command)?;
    let models = run.stage("train", |_| build_models(cfg))?;
    let env = eval_env(cfg, &models)?;
    let lc = cfg.learn_config(dim);
    let outcome = run.stage("learn", |files| {
        let o = learn_loop(&lc, &env)?;
        let c = files.write_with("curve.csv", |w| o.curve.write_csv(w))?;
        files.write("curve.svg", render(Chart::Curve, "Best ratio while learning", utf8(&c)?)?)?;
        Ok(o)
    })?;
    let (x_star, sampled) = run.stage("sample", |files| {
        let (vf, report) = final_fit(&outcome, &lc)?;
        info!("final surrogate: held-out mse {:?}", report.holdout_mse);
        files.write_with("surrogate.txt", |w| vf.save(w))?;
        let pool = outcome.pool();
        files.write_with("pool.csv", |w| write_pool_csv(w, &pool))?;
        let xs: Vec<Vec<f64>> = pool.iter().map(|s| s.x.clone()).collect();
        let mut rng = rng::stream(cfg.seeds.sampler, &[]);
        let so = sample_optimal(&vf, &parameter_box(dim)?, &cfg.sampler, &xs, &mut rng)?;
        files.write_with("sampler_trace.csv", |w| so.trace.write_csv(w))?;
        let sampled = eval_candidate(&so.x, &env)?;
        info!("sampler point {:?}: r = {:.4} ({:?})", so.x, sampled.sample.r, so.stop);
        let mut all: Vec<&Evaluation> = outcome.evaluations.iter().collect();
        all.push(&sampled);
        let xs: Vec<Vec<f64>> = all.iter().map(|e| e.sample.x.clone()).collect();
        let recs: Vec<_> = all.iter().map(|e| e.metrics).collect();
        files.write_with("candidates.csv", |w| write_metrics_csv(w, &xs, &recs))?;
        // The sampler's point replaces the best evaluation only if strictly better.
        let x_star = if sampled.sample.r > outcome.best.sample.r {
            XStar { x: sampled.sample.x.clone(), r: sampled.sample.r, source: "sampler".into() }
        } else {
            XStar { x: outcome.best.sample.x.clone(), r: outcome.best.sample.r, source: "evaluated".into() }
        };
        files.write("x_star.csv", x_star.to_csv())?;
        Ok((x_star, sampled))
    })?;
    info!("x* = {:?}, r = {:.4} ({})", x_star.x, x_star.r, x_star.source);

    run.check("learning curve non-decreasing", outcome.curve.is_monotone(), format!("{} rounds", outcome.curve.points.len()));
    let round0 = outcome.evaluations.iter().take(lc.batch).map(|e| e.sample.r).fold(0.0, f64::max);
    run.check(
        "x* beats round-0 uniform candidates",
        x_star.r >= round0,
        format!("r(x*) {} vs round-0 max {}; sampler point r {}", g6(x_star.r), g6(round0), g6(sampled.sample.r)),
    );
    let ratio = anisotropy(&x_star.x[..3]);
    run.check(
        "x* is anisotropic",
        ratio >= cfg.checks.min_anisotropy,
        format!("max/min std ratio {} (need >= {})", g6(ratio), cfg.checks.min_anisotropy),
    );
    if dim == 6 {
        let means_ok = x_star.x[3..].iter().all(|m| m.abs() <= crate::smoothing::MEAN_BOUND);
        run.check("means within bounds", means_ok, format!("means {:?}", &x_star.x[3..]));
        match XStar::read(&cfg.out_dir, Command::LearnNoise) {
            Ok(x3) => {
                let floor = (1.0 - cfg.checks.means_tolerance) * x3.r;
                run.check(
                    "6-dim best within tolerance of 3-dim best",
                    x_star.r >= floor,
                    format!("6-dim r {} vs 3-dim r {} (floor {})", g6(x_star.r), g6(x3.r), g6(floor)),
                );
            }
            Err(e) => warn!("skipping the 3-dim comparison: {e}"),
        }
        defense_stages(cfg, &models, &x_star.x, &mut run)?;
    }
    run.finish(cfg)
}

fn cmd_defend(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let x_star = XStar::read(&cfg.out_dir, Command::LearnNoise)?;
    let mut run = Run::new(&cfg.out_dir, Command::Defend)?;
    let models = run.stage("train", |_| build_models(cfg))?;
    defense_stages(cfg, &models, &x_star.x, &mut run)?;
    run.finish(cfg)
}

/// Offline acceleration comparison, closed-loop trigger episodes and the
/// stability check, all with the smoothed backdoored controller at `x`.
fn defense_stages(cfg: &ExperimentConfig, m: &Models, x: &[f64], run: &mut Run) -> Result<()> {
    let noise = NoiseParams::from_vector(x, m.scales)?;
    let target = cfg.trigger.target_accel;
    let (trig_smoothed, genuine_dev) = run.stage("offline", |files| {
        let s = cfg.seeds.offline;
        let off = SmoothedController::new(&m.adv, noise, cfg.smoothing.offline_n_mc, s)?;
        let genuine = m.test.subsample(cfg.defend.n_genuine, s).observations();
        let trigger = cfg.trigger.samples(cfg.defend.n_trigger, rng::derive_seed(s, &[1]));
        let mut rows: Vec<(&str, f64, f64)> = Vec::new();
        for (tag, set, offset) in [("genuine", &genuine, 0u64), ("trigger", &trigger, 1u64 << 32)] {
            for (i, o) in set.iter().enumerate() {
                rows.push((tag, m.adv.forward(o), off.smooth_action(o, offset + i as u64)));
            }
        }
        let mean = |tag: &str, f: fn(f64, f64) -> f64| {
            let v: Vec<f64> = rows.iter().filter(|r| r.0 == tag).map(|r| f(r.1, r.2)).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let trig_smoothed = mean("trigger", |_, s| s);
        let genuine_dev = mean("genuine", |r, s| (s - r).abs());
        let csv = to_bytes(|w| {
            use std::io::Write;
            writeln!(w, "tag,raw_accel,smoothed_accel")?;
            for (tag, r, s) in &rows {
                writeln!(w, "{tag},{},{}", g6(*r), g6(*s))?;
            }
            Ok(())
        })?;
        files.write("accelerations.csv", &csv)?;
        files.write("trigger_hist.svg", render(Chart::TriggerHistogram, "Trigger probes", utf8(&csv)?)?)?;
        files.write("genuine_hist.svg", render(Chart::GenuineHistogram, "Genuine probes", utf8(&csv)?)?)?;
        Ok((trig_smoothed, genuine_dev))
    })?;
    let (smoothed_crashes, raw_crashes) = run.stage("closed-loop", |files| {
        let sim = cfg.sim_config();
        let sc = SmoothedController::new(&m.adv, noise, cfg.smoothing.n_mc, cfg.seeds.defend_smoothing)?;
        let mut rng = rng::stream(cfg.seeds.defend, &[]);
        let mut rows = Vec::new();
        for e in 0..cfg.defend.episodes {
            let o: Observation = cfg.trigger.sample(&mut rng);
            let enc = StagedEncounter {
                time: cfg.defend.start + cfg.defend.spacing * e as f64,
                av_speed: o.v_av,
                leader_speed: o.v_lead,
                gap: o.gap,
                hold: cfg.encounter.hold,
            };
            let scenario = Scenario {
                perturbation: sim.initial_perturbation,
                seed: rng::derive_seed(cfg.seeds.defend, &[e as u64]),
                encounters: vec![enc],
            };
            let smoothed = sim::run_episode(&sim, &sc, &scenario)?;
            let raw = sim::run_episode(&sim, &m.adv, &scenario)?;
            if e == 0 {
                let csv = files.write_with("defended_trajectory.csv", |w| smoothed.write_csv(w))?;
                files.write("defended_speed.svg", render(Chart::SpeedProfile, "Smoothed AV through a trigger encounter", utf8(&csv)?)?)?;
            }
            rows.push((enc, smoothed.crashed(), raw.crashed()));
        }
        files.write_with("defense_episodes.csv", |w| {
            use std::io::Write;
            writeln!(w, "episode,t,av_speed,leader_speed,gap,smoothed_crash,raw_crash")?;
            for (e, (enc, s, r)) in rows.iter().enumerate() {
                let (s, r) = (u8::from(*s), u8::from(*r));
                writeln!(w, "{e},{},{},{},{},{s},{r}", g6(enc.time), g6(enc.av_speed), g6(enc.leader_speed), g6(enc.gap))?;
            }
            Ok(())
        })?;
        Ok((rows.iter().filter(|r| r.1).count(), rows.iter().filter(|r| r.2).count()))
    })?;
    let (settle, r1_raw, r1_smoothed) = run.stage("stability", |files| {
        let sim = cfg.sim_config();
        let scenario = Scenario::from_config(&sim);
        let sc = SmoothedController::new(&m.adv, noise, cfg.smoothing.n_mc, cfg.seeds.defend_smoothing)?;
        let smoothed = sim::run_episode(&sim, &sc, &scenario)?;
        let raw = sim::run_episode(&sim, &m.adv, &scenario)?;
        let (t0, t1) = (sim.horizon - cfg.metrics.window, sim.horizon);
        let r1_raw = metrics::stability(&raw, t0, t1)?;
        let r1_smoothed = metrics::stability(&smoothed, t0, t1)?;
        let settle = SettleStats::measure(&smoothed, cfg)?;
        let raw_settle = SettleStats::measure(&raw, cfg)?;
        files.write_with("stability.csv", |w| {
            use std::io::Write;
            writeln!(w, "controller,r1,cross_std,mean_speed,crashed")?;
            for (name, r1, s) in [("raw", r1_raw, raw_settle), ("smoothed", r1_smoothed, settle)] {
                writeln!(w, "{name},{},{},{},{}", g6(r1), g6(s.cross_std), g6(s.mean_speed), u8::from(s.crashed))?;
            }
            Ok(())
        })?;
        Ok((settle, r1_raw, r1_smoothed))
    })?;
    let c = &cfg.checks;
    let n = cfg.defend.episodes;
    run.check(
        "no crashes with smoothing",
        smoothed_crashes <= c.max_smoothed_crashes,
        format!("{smoothed_crashes}/{n} smoothed episodes crashed"),
    );
    run.check(
        "trigger crashes without smoothing",
        raw_crashes >= c.min_raw_crashes,
        format!("{raw_crashes}/{n} raw episodes crashed (need >= {})", c.min_raw_crashes),
    );
    let bound = c.trigger_reduction * target;
    run.check(
        "smoothed trigger acceleration reduced",
        trig_smoothed <= bound,
        format!("mean smoothed trigger accel {} (need <= {})", g6(trig_smoothed), g6(bound)),
    );
    run.check(
        "genuine behaviour preserved",
        genuine_dev <= c.max_genuine_dev,
        format!("mean |smoothed - raw| on genuine probes {} (need <= {})", g6(genuine_dev), c.max_genuine_dev),
    );
    run.check(
        "stable under smoothing",
        settle.holds(cfg),
        format!("{}; r1 raw {} smoothed {}", settle.describe(), g6(r1_raw), g6(r1_smoothed)),
    );
    Ok(())
}

fn cmd_baselines(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let x_star = XStar::read(&cfg.out_dir, Command::LearnNoise)?;
    let mut run = Run::new(&cfg.out_dir, Command::Baselines)?;
    let models = run.stage("train", |_| build_models(cfg))?;
    let env = eval_env(cfg, &models)?;
    let b = &cfg.baselines;
    let uniform_max = run.stage("uniform", |files| {
        let xs = uniform_candidates(&parameter_box(3)?, b.n_uniform, cfg.seeds.uniform);
        let evals = eval_many(&xs, &env, cfg.threads)?;
        let recs: Vec<_> = evals.iter().map(|e| e.metrics).collect();
        files.write_with("uniform.csv", |w| write_metrics_csv(w, &xs, &recs))?;
        Ok(evals.iter().map(|e| e.sample.r).fold(0.0, f64::max))
    })?;
    let (iso_max, iso_rows) = run.stage("isotropic", |files| {
        let xs: Vec<Vec<f64>> = (0..b.iso_points).map(|k| vec![b.iso_start + b.iso_step * k as f64; 3]).collect();
        let evals = eval_many(&xs, &env, cfg.threads)?;
        let recs: Vec<_> = evals.iter().map(|e| e.metrics).collect();
        let csv = files.write_with("isotropic.csv", |w| write_metrics_csv(w, &xs, &recs))?;
        files.write("isotropic.svg", render(Chart::Isotropic, "Isotropic noise scan", utf8(&csv)?)?)?;
        Ok((evals.iter().map(|e| e.sample.r).fold(0.0, f64::max), evals.len()))
    })?;
    run.stage("compare", |files| {
        files.write(
            "comparison.csv",
            format!("method,max_r\nlearned,{}\nuniform,{}\nisotropic,{}\n", g6(x_star.r), g6(uniform_max), g6(iso_max)),
        )
    })?;
    run.check("learned beats uniform sampling", x_star.r >= uniform_max, format!("r(x*) {} vs uniform max {}", g6(x_star.r), g6(uniform_max)));
    run.check("learned beats isotropic scan", x_star.r >= iso_max, format!("r(x*) {} vs isotropic max {}", g6(x_star.r), g6(iso_max)));
    run.check("isotropic scan size", iso_rows == b.iso_points, format!("{iso_rows} rows"));
    run.finish(cfg)
}

/// Regenerates every chart from the CSVs already in the output directory.
fn cmd_report(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut sources = Vec::new();
    for command in Command::ALL {
        for (csv, svg, chart, title) in CHARTS {
            let path = cfg.out_dir.join(command.name()).join(csv);
            if path.is_file() {
                sources.push((command, path, *svg, *chart, *title));
            }
        }
    }
    if sources.is_empty() {
        return Err(Error::Stage(format!("no report CSVs under {}", cfg.out_dir.display())));
    }
    let mut run = Run::new(&cfg.out_dir, Command::Report)?;
    run.stage("charts", |files| {
        for (command, path, svg, chart, title) in &sources {
            let text = fs::read_to_string(path)?;
            let out = render(*chart, title, &text)?;
            fs::write(cfg.out_dir.join(command.name()).join(svg), out)?;
            files.files.push(format!("../{}/{svg}", command.name()));
        }
        Ok(())
    })?;
    run.finish(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chart {
    SpeedProfile,
    Curve,
    Isotropic,
    TriggerHistogram,
    GenuineHistogram,
}

/// `(csv, svg, chart, title)` for every chart a command may emit.
pub const CHARTS: &[(&str, &str, Chart, &str)] = &[
    ("trajectory_no_av.csv", "speed_no_av.svg", Chart::SpeedProfile, "Speeds without an AV"),
    ("trajectory_benign.csv", "speed_benign.svg", Chart::SpeedProfile, "Speeds with the benign AV"),
    ("demo_adv.csv", "demo_adv.svg", Chart::SpeedProfile, "Attack demo, backdoored AV"),
    ("demo_benign.csv", "demo_benign.svg", Chart::SpeedProfile, "Attack demo, benign AV"),
    ("defended_trajectory.csv", "defended_speed.svg", Chart::SpeedProfile, "Smoothed AV through a trigger encounter"),
    ("curve.csv", "curve.svg", Chart::Curve, "Best ratio while learning"),
    ("isotropic.csv", "isotropic.svg", Chart::Isotropic, "Isotropic noise scan"),
    ("accelerations.csv", "trigger_hist.svg", Chart::TriggerHistogram, "Trigger probes"),
    ("accelerations.csv", "genuine_hist.svg", Chart::GenuineHistogram, "Genuine probes"),
];

/// An in-memory CSV table with a header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Parse(format!("CSV header: {e}")))?.iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(|e| Error::Parse(format!("CSV: {e}"))))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { header, rows })
    }

    pub fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse(format!("CSV lacks column '{name}'")))
    }

    pub fn f64_col(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name)?;
        self.rows.iter().map(|r| parse_f64(&r[c])).collect()
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("'{s}' is not a number")))
}

const MAX_PROFILE_POINTS: usize = 600;

/// Renders one chart from the text of its CSV.
pub fn render(chart: Chart, title: &str, csv: &str) -> Result<String> {
    let t = Table::parse(csv)?;
    Ok(match chart {
        Chart::SpeedProfile => {
            let times = t.f64_col("t")?;
            let ids = t.f64_col("vehicle_id")?;
            let speeds = t.f64_col("speed_mps")?;
            let is_av = t.f64_col("is_av")?;
            let n = ids.iter().fold(0.0, |m: f64, v| m.max(*v)) as usize + 1;
            let steps = times.len() / n;
            let stride = steps.div_ceil(MAX_PROFILE_POINTS).max(1);
            let mut series: Vec<(Vec<(f64, f64)>, bool)> = vec![(Vec::new(), false); n];
            for k in (0..times.len()).filter(|k| (k / n) % stride == 0) {
                let i = ids[k] as usize;
                series[i].0.push((times[k], speeds[k]));
                series[i].1 |= is_av[k] == 1.0;
            }
            let mut out: Vec<Series> = Vec::new();
            for (k, (pts, _)) in series.iter().filter(|s| !s.1).enumerate() {
                let label = if k == 0 { "human drivers" } else { "" };
                out.push(Series::new(label, pts.clone()).styled("#9e9e9e", 0.8));
            }
            for (pts, _) in series.iter().filter(|s| s.1) {
                out.push(Series::new("AV", pts.clone()).styled("#d62728", 2.5));
            }
            svg::line_chart(title, "time (s)", "speed (m/s)", &out)
        }
        Chart::Curve => {
            let pts = t.f64_col("round")?.into_iter().zip(t.f64_col("best_r")?).collect();
            svg::line_chart(title, "round", "best ratio so far", &[Series::new("best r", pts)])
        }
        Chart::Isotropic => {
            let pts = t.f64_col("x1")?.into_iter().zip(t.f64_col("r")?).collect();
            svg::line_chart(title, "isotropic std s", "ratio r", &[Series::new("r(s, s, s)", pts)])
        }
        Chart::TriggerHistogram | Chart::GenuineHistogram => {
            let want = if chart == Chart::TriggerHistogram { "trigger" } else { "genuine" };
            let tag = t.col("tag")?;
            let (raw_c, sm_c) = (t.col("raw_accel")?, t.col("smoothed_accel")?);
            let rows: Vec<&Vec<String>> = t.rows.iter().filter(|r| r[tag] == want).collect();
            let raw = rows.iter().map(|r| parse_f64(&r[raw_c])).collect::<Result<Vec<_>>>()?;
            let sm = rows.iter().map(|r| parse_f64(&r[sm_c])).collect::<Result<Vec<_>>>()?;
            svg::histogram(title, "acceleration (m/s²)", &[("raw", &raw), ("smoothed", &sm)], 40)
        }
    })
}

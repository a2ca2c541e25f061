//! The subcommands. Each returns what it wrote so callers and tests can
//! inspect results without re-reading files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use perimeter_core::ctrl::{Controller, FixedRate, NoControl, Observation, PiController};
use perimeter_core::demand::FutureDemand;
use perimeter_core::metrics::{mfd_series, MfdPhase};
use perimeter_core::net::Network;
use perimeter_core::ppo::{
    policy_grid, GridPoint, Policy, PolicyController, PerimeterEnv, StateDesign, StateVariant, Trainer,
    TrainerState, ROUTE_SEED_BASE,
};
use perimeter_core::scenario::{RunResult, Scenario};
use perimeter_core::sim::trace_rows;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, RunConfig};
use crate::error::CliError;
use crate::output::{ensure_dir, read_csv, write_atomic, write_csv, write_json};

/// Runs `f` over `items` on up to `jobs` scoped threads; results keep the
/// input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = match jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Resolved scenario and network for one configuration.
pub struct Context {
    pub cfg: RunConfig,
    pub scenario: Scenario,
    pub net: Arc<Network>,
    pub hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let scenario = cfg.scenario.build()?;
        let net = scenario.network()?;
        let hash = cfg.hash();
        Ok(Context {
            cfg,
            scenario,
            net,
            hash,
        })
    }

    fn controller(&self, kind: ControllerKind, policy: Option<&Policy>) -> Result<Box<dyn Controller>, CliError> {
        let bounds = self.scenario.bounds(&self.net);
        Ok(match kind {
            ControllerKind::Npc => Box::new(NoControl),
            ControllerKind::Fixed => Box::new(FixedRate(self.cfg.fixed_rate)),
            ControllerKind::Pi => Box::new(PiController::new(self.cfg.pi.params(bounds))),
            ControllerKind::Ppo => {
                let policy = policy.ok_or_else(|| CliError::Missing(vec![self.cfg.policy_path()]))?;
                Box::new(PolicyController { policy: policy.clone() })
            }
        })
    }
}

pub fn load_policy(path: &Path) -> Result<Policy, CliError> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(vec![path.to_path_buf()]))?;
    Policy::from_json(&text).map_err(|e| CliError::Config(format!("policy {}: {e}", path.display())))
}

/// One controller on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsRow {
    pub seed: u64,
    pub controller: String,
    #[serde(rename = "tts_total_h")]
    pub total_h: f64,
    #[serde(rename = "tts_inside_h")]
    pub inside_h: f64,
    #[serde(rename = "tts_outside_h")]
    pub outside_h: f64,
    pub unfinished: usize,
    pub truncated: bool,
    pub gridlock_moves: usize,
    pub end_time_s: f64,
}

pub const TTS_HEADER: &[&str] = &[
    "seed",
    "controller",
    "tts_total_h",
    "tts_inside_h",
    "tts_outside_h",
    "unfinished",
    "truncated",
    "gridlock_moves",
    "end_time_s",
];

impl TtsRow {
    fn new(kind: ControllerKind, r: &RunResult) -> Self {
        TtsRow {
            seed: r.seed,
            controller: kind.to_string(),
            total_h: r.tts.total_h,
            inside_h: r.tts.inside_h,
            outside_h: r.tts.outside_h,
            unfinished: r.tts.unfinished,
            truncated: r.truncated,
            gridlock_moves: r.gridlock_moves,
            end_time_s: r.end_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfdRow {
    pub seed: u64,
    pub controller: String,
    /// Seconds.
    pub window_start: f64,
    pub density: f64,
    pub production: f64,
    pub phase: MfdPhase,
}

const MFD_HEADER: &[&str] = &["seed", "controller", "window_start", "density", "production", "phase"];
const TRACE_HEADER: &[&str] = &["cycle", "clock", "inner_density", "feeder_density", "completed", "meter_rate"];
const CURVE_HEADER: &[&str] = &["episode", "return", "tts_h", "mean_rate"];

fn run_all(
    ctx: &Context,
    scenario: &Scenario,
    kinds: &[ControllerKind],
    policy: Option<&Policy>,
) -> Result<Vec<(ControllerKind, RunResult)>, CliError> {
    let jobs: Vec<(ControllerKind, u64)> = kinds
        .iter()
        .flat_map(|&k| ctx.cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    par_map(&jobs, ctx.cfg.jobs, |&(kind, seed)| -> Result<_, CliError> {
        let mut c = ctx.controller(kind, policy)?;
        Ok((kind, scenario.run(&ctx.net, c.as_mut(), seed)?))
    })
    .into_iter()
    .collect()
}

pub struct BaselineOutput {
    pub tts: Vec<TtsRow>,
    pub mfd: Vec<MfdRow>,
}

/// Runs every configured baseline controller on every seed and writes
/// `tts.csv`, `mfd.csv` and one trace per run under `traces/`.
pub fn baseline(ctx: &Context) -> Result<BaselineOutput, CliError> {
    if let Some(k) = ctx.cfg.controllers.iter().find(|k| **k == ControllerKind::Ppo) {
        return Err(CliError::Config(format!(
            "controllers: baseline runs npc, pi or fixed, not {k}; use evaluate for ppo"
        )));
    }
    let runs = run_all(ctx, &ctx.scenario, &ctx.cfg.controllers, None)?;
    let out = &ctx.cfg.out;
    ensure_dir(out)?;
    let mut tts = Vec::new();
    let mut mfd = Vec::new();
    for (kind, r) in &runs {
        tts.push(TtsRow::new(*kind, r));
        for p in mfd_series(&r.snapshot_trace(), ctx.cfg.analysis.mfd_window) {
            mfd.push(MfdRow {
                seed: r.seed,
                controller: kind.to_string(),
                window_start: p.window_start,
                density: p.density,
                production: p.production,
                phase: p.phase,
            });
        }
        let trace = out.join("traces").join(format!("{kind}_seed{}.csv", r.seed));
        write_csv(&trace, &ctx.hash, TRACE_HEADER, &trace_rows(&r.cycles))?;
    }
    write_csv(&out.join("tts.csv"), &ctx.hash, TTS_HEADER, &tts)?;
    write_csv(&out.join("mfd.csv"), &ctx.hash, MFD_HEADER, &mfd)?;
    Ok(BaselineOutput { tts, mfd })
}

/// Training state on disk, tied to the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub training_hash: String,
    pub seed: u64,
    pub state: TrainerState,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Ignore an existing checkpoint and start over.
    pub fresh: bool,
    /// Stop after this many batches in this invocation.
    pub max_batches: Option<usize>,
    pub quiet: bool,
}

pub struct TrainOutput {
    pub resumed_at: Option<usize>,
    pub state: TrainerState,
    pub policy: Policy,
}

fn save_checkpoint(ctx: &Context, design: StateDesign, ck: &Checkpoint) -> Result<(), CliError> {
    let out = &ctx.cfg.out;
    let bytes = serde_json::to_vec(ck).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join("checkpoint.json"), &bytes)?;
    write_csv(&out.join("train.csv"), &ctx.hash, CURVE_HEADER, &ck.state.curve)?;
    let policy = Policy::new(design, ctx.scenario.bounds(&ctx.net), ck.state.best.clone());
    write_atomic(&ctx.cfg.policy_path(), policy.to_json().as_bytes())
}

/// Trains a PPO policy, checkpointing every `checkpoint_every` batches and
/// resuming from `<out>/checkpoint.json` when it matches the configuration.
pub fn train(ctx: &Context, opts: &TrainOptions) -> Result<TrainOutput, CliError> {
    let cfg = &ctx.cfg;
    let path = cfg.out.join("checkpoint.json");
    let key = cfg.training_hash();
    let variant = cfg.state_design;
    let mut resumed_at = None;
    let mut trainer = if path.exists() && !opts.fresh {
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if ck.training_hash != key {
            return Err(CliError::Config(format!(
                "{} was written for a different training configuration; pass --fresh to start over",
                path.display()
            )));
        }
        resumed_at = Some(ck.state.episodes_done);
        Trainer::resume(cfg.ppo.clone(), ck.seed, ck.state)
    } else {
        Trainer::new(cfg.ppo.clone(), variant.dim(), cfg.init_seed)
    };

    let design = StateDesign::for_scenario(variant, &ctx.scenario);
    let mut env = PerimeterEnv::new(
        ctx.scenario.clone(),
        Arc::clone(&ctx.net),
        design,
        cfg.train_seed,
        cfg.ppo.reward_scale,
    );
    if cfg.ppo.route_reseed {
        env = env.with_route_reseed(ROUTE_SEED_BASE);
    }

    let seed = trainer.seed;
    let mut failure: Option<CliError> = None;
    let mut since = 0;
    let result = trainer.train(&mut env, opts.max_batches, |state| {
        since += 1;
        if !opts.quiet {
            let recent = &state.curve[state.curve.len().saturating_sub(cfg.ppo.batch_episodes)..];
            let tts: Vec<f64> = recent.iter().filter_map(|e| e.tts_h).collect();
            let mean = tts.iter().sum::<f64>() / tts.len().max(1) as f64;
            eprintln!(
                "episodes {:>5}/{}  batch tts {mean:8.1} h  best {:8.1} h",
                state.episodes_done, cfg.ppo.episodes, state.best_score
            );
        }
        if since >= cfg.checkpoint_every {
            since = 0;
            let ck = Checkpoint {
                training_hash: key.clone(),
                seed,
                state: state.clone(),
            };
            if let Err(e) = save_checkpoint(ctx, design, &ck) {
                failure = Some(e);
                return Err(perimeter_core::PpoError::Config("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;

    let ck = Checkpoint {
        training_hash: key,
        seed,
        state: trainer.state,
    };
    save_checkpoint(ctx, design, &ck)?;
    let policy = Policy::new(design, ctx.scenario.bounds(&ctx.net), ck.state.best.clone());
    Ok(TrainOutput {
        resumed_at,
        state: ck.state,
        policy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub slice: String,
    pub density: f64,
    pub rate: f64,
    pub state: String,
}

const GRID_HEADER: &[&str] = &["slice", "density", "rate", "state"];

/// Observation the policy sweep holds fixed apart from inner density.
pub fn grid_base(design: &StateDesign) -> Observation {
    Observation {
        feeder_density: 0.25 * design.density_max,
        future: FutureDemand {
            n12: 0.5 * design.demand_max,
            n22: 0.5 * design.demand_max,
            ..FutureDemand::default()
        },
        ..Observation::default()
    }
}

/// Future-demand slices of the policy sweep: low and high for designs that
/// see future demand, a single base slice otherwise.
pub fn grid_slices(design: &StateDesign) -> Vec<(String, FutureDemand)> {
    let at = |f: f64| FutureDemand {
        n12: f * design.demand_max,
        n22: f * design.demand_max,
        ..FutureDemand::default()
    };
    match design.variant {
        StateVariant::D6 => vec![("low".into(), at(0.25)), ("high".into(), at(0.75))],
        _ => vec![("base".into(), at(0.5))],
    }
}

pub fn grid_densities(design: &StateDesign, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| design.density_max * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn sweep_policy(policy: &Policy, points: usize) -> Result<Vec<GridPoint>, CliError> {
    let d = &policy.design;
    Ok(policy_grid(policy, &grid_densities(d, points), &grid_base(d), &grid_slices(d))?)
}

pub struct EvaluateOutput {
    pub rows: Vec<TtsRow>,
    pub grid: Vec<GridPoint>,
}

/// Evaluates every configured controller on every seed; PPO runs use the
/// mean action of the stored policy.
pub fn evaluate(ctx: &Context) -> Result<EvaluateOutput, CliError> {
    let policy = if ctx.cfg.controllers.contains(&ControllerKind::Ppo) {
        Some(load_policy(&ctx.cfg.policy_path())?)
    } else {
        None
    };
    let runs = run_all(ctx, &ctx.scenario, &ctx.cfg.controllers, policy.as_ref())?;
    let rows: Vec<TtsRow> = runs.iter().map(|(k, r)| TtsRow::new(*k, r)).collect();
    write_csv(&ctx.cfg.out.join("eval.csv"), &ctx.hash, TTS_HEADER, &rows)?;
    let mut grid = Vec::new();
    if let Some(p) = &policy {
        grid = sweep_policy(p, ctx.cfg.analysis.grid_points)?;
        let csv_rows: Vec<GridRow> = grid
            .iter()
            .map(|g| GridRow {
                slice: g.slice.clone(),
                density: g.state[0] * p.design.density_max,
                rate: g.rate,
                state: g.state.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";"),
            })
            .collect();
        write_csv(&ctx.cfg.out.join("policy_grid.csv"), &ctx.hash, GRID_HEADER, &csv_rows)?;
    }
    Ok(EvaluateOutput { rows, grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Scale,
    Peakedness,
}

impl SweepMode {
    pub fn points(self) -> Vec<f64> {
        match self {
            SweepMode::Scale => vec![0.8, 0.9, 1.0, 1.1, 1.2],
            SweepMode::Peakedness => vec![1.0, 1.5, 2.0, 2.5, 3.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::Scale => "scale",
            SweepMode::Peakedness => "peakedness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SweepMode,
    pub point: f64,
    pub controller: String,
    pub seed: u64,
    #[serde(rename = "tts_total_h")]
    pub total_h: f64,
    #[serde(rename = "tts_inside_h")]
    pub inside_h: f64,
    #[serde(rename = "tts_outside_h")]
    pub outside_h: f64,
    pub unfinished: usize,
    pub truncated: bool,
}

const SWEEP_HEADER: &[&str] = &[
    "mode",
    "point",
    "controller",
    "seed",
    "tts_total_h",
    "tts_inside_h",
    "tts_outside_h",
    "unfinished",
    "truncated",
];

/// Scenario at one sweep point. Controllers, including the policy, stay as
/// configured for the nominal scenario.
pub fn sweep_scenario(base: &Scenario, mode: SweepMode, point: f64) -> Result<Scenario, CliError> {
    let demand = match mode {
        SweepMode::Scale => base.demand.scale(point),
        SweepMode::Peakedness => base.demand.with_peakedness(point),
    }
    .map_err(|e| CliError::Config(format!("{}: {e}", mode.as_str())))?;
    Ok(Scenario {
        demand,
        ..base.clone()
    })
}

/// Evaluates every controller at every point of `mode` and writes
/// `sweep_<mode>.csv`.
pub fn generalize(ctx: &Context, mode: SweepMode, points: Option<Vec<f64>>) -> Result<Vec<SweepRow>, CliError> {
    let policy = if ctx.cfg.controllers.contains(&ControllerKind::Ppo) {
        Some(load_policy(&ctx.cfg.policy_path())?)
    } else {
        None
    };
    let points = points.unwrap_or_else(|| mode.points());
    let scenarios = points
        .iter()
        .map(|&p| sweep_scenario(&ctx.scenario, mode, p))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, ControllerKind, u64)> = (0..points.len())
        .flat_map(|i| {
            ctx.cfg
                .controllers
                .iter()
                .flat_map(move |&k| ctx.cfg.seeds.iter().map(move |&s| (i, k, s)))
        })
        .collect();
    let rows = par_map(&jobs, ctx.cfg.jobs, |&(i, kind, seed)| -> Result<SweepRow, CliError> {
        let mut c = ctx.controller(kind, policy.as_ref())?;
        let r = scenarios[i].run(&ctx.net, c.as_mut(), seed)?;
        Ok(SweepRow {
            mode,
            point: points[i],
            controller: kind.to_string(),
            seed,
            total_h: r.tts.total_h,
            inside_h: r.tts.inside_h,
            outside_h: r.tts.outside_h,
            unfinished: r.tts.unfinished,
            truncated: r.truncated,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let name = format!("sweep_{}.csv", mode.as_str());
    write_csv(&ctx.cfg.out.join(name), &ctx.hash, SWEEP_HEADER, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub seeds: usize,
    pub mean_total_h: f64,
    pub mean_inside_h: f64,
    pub mean_outside_h: f64,
    pub truncated_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub controller: String,
    pub relative_to: String,
    /// `(baseline - controller) / baseline`, in percent.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: SweepMode,
    pub point: f64,
    pub controller: String,
    pub mean_total_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sources: Vec<PathBuf>,
    pub controllers: Vec<ControllerSummary>,
    pub improvements: Vec<Improvement>,
    pub sweeps: Vec<SweepSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn order(name: &str) -> (usize, String) {
    let rank = ["npc", "fixed", "pi", "ppo"].iter().position(|c| *c == name).unwrap_or(4);
    (rank, name.to_string())
}

/// Aggregates `tts.csv` and `eval.csv` (the latter wins for a controller
/// present in both) plus any sweeps, and writes `report.json`.
pub fn report(out: &Path) -> Result<Report, CliError> {
    let inputs = [out.join("tts.csv"), out.join("eval.csv")];
    let present: Vec<&PathBuf> = inputs.iter().filter(|p| p.exists()).collect();
    if present.is_empty() {
        return Err(CliError::Missing(inputs.to_vec()));
    }
    let mut by_controller: BTreeMap<(usize, String), Vec<TtsRow>> = BTreeMap::new();
    let mut sources = Vec::new();
    for path in present {
        let (_, rows): (_, Vec<TtsRow>) = read_csv(path)?;
        let mut fresh: BTreeMap<(usize, String), Vec<TtsRow>> = BTreeMap::new();
        for r in rows {
            fresh.entry(order(&r.controller)).or_default().push(r);
        }
        by_controller.extend(fresh);
        sources.push(path.clone());
    }
    let controllers: Vec<ControllerSummary> = by_controller
        .iter()
        .map(|((_, name), rows)| ControllerSummary {
            controller: name.clone(),
            seeds: rows.len(),
            mean_total_h: mean(rows.iter().map(|r| r.total_h)),
            mean_inside_h: mean(rows.iter().map(|r| r.inside_h)),
            mean_outside_h: mean(rows.iter().map(|r| r.outside_h)),
            truncated_runs: rows.iter().filter(|r| r.truncated).count(),
        })
        .collect();
    let mut improvements = Vec::new();
    for base in ["npc", "pi"] {
        let Some(b) = controllers.iter().find(|c| c.controller == base) else {
            continue;
        };
        for c in &controllers {
            if order(&c.controller).0 > order(base).0 && b.mean_total_h > 0.0 {
                improvements.push(Improvement {
                    controller: c.controller.clone(),
                    relative_to: base.to_string(),
                    percent: 100.0 * (b.mean_total_h - c.mean_total_h) / b.mean_total_h,
                });
            }
        }
    }
    let mut sweeps = Vec::new();
    for mode in [SweepMode::Scale, SweepMode::Peakedness] {
        let path = out.join(format!("sweep_{}.csv", mode.as_str()));
        if !path.exists() {
            continue;
        }
        let (_, rows): (_, Vec<SweepRow>) = read_csv(&path)?;
        let mut groups: BTreeMap<(i64, (usize, String)), Vec<f64>> = BTreeMap::new();
        for r in rows {
            groups
                .entry(((r.point * 1000.0).round() as i64, order(&r.controller)))
                .or_default()
                .push(r.total_h);
        }
        for ((p, (_, controller)), v) in groups {
            sweeps.push(SweepSummary {
                mode,
                point: p as f64 / 1000.0,
                controller,
                mean_total_h: mean(v.into_iter()),
            });
        }
        sources.push(path);
    }
    let report = Report {
        sources,
        controllers,
        improvements,
        sweeps,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

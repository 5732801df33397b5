//! Training loops, evaluation and the run driver behind the CLI.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::dataset::{
    collect_offline_rollouts, extract_merge_pairs, generate_synthetic_dataset, offline_trajectory_csv, parse_file,
    parse_trajectories, split_episodes, write_extraction, OfflineEpisode, OfflineRolloutSpec, OfflineRollouts,
    OfflineTick, OFFLINE_OBS_DIM,
};
use crate::env::{collect_rollouts, trajectory_csv, RolloutSpec, Rollouts, TickRecord, OBS_DIM};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::optimizer::{sapo_update, StepReport};
use crate::policy::{Checkpoint, CriticParams, MlpSpec, PolicyParams};
use crate::rollout::{mean, EpisodeSummary, RolloutBatch};

/// One line of `metrics.jsonl`. Contains nothing time-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub episodes: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub mean_min_distance: f64,
    pub violation_rate: f64,
    pub infeasibility_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_tracking_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_tracking_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub update: Option<StepReport>,
}

impl MetricsRecord {
    pub fn from_batch(epoch: usize, phase: &str, batch: &RolloutBatch) -> Self {
        let tracking: Vec<f64> = batch.episodes.iter().filter_map(|e| e.mean_tracking_error).collect();
        Self {
            epoch,
            phase: phase.to_string(),
            episodes: batch.episodes.len(),
            steps: batch.len(),
            mean_return: batch.mean_episode_return(),
            mean_min_distance: batch.mean_min_distance(),
            violation_rate: batch.cbf_violation_rate(),
            infeasibility_rate: batch.infeasibility_rate(),
            mean_tracking_error: (!tracking.is_empty()).then(|| mean(tracking.into_iter())),
            val_tracking_error: None,
            update: None,
        }
    }
}

/// One line of `timing.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: Option<usize>,
    pub phase: String,
    pub wall_seconds: f64,
}

/// Aggregate over evaluation episodes, written to `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub r_safe: f64,
    /// Fraction of episodes whose minimum distance stayed at or above `r_safe`.
    pub safe_fraction: f64,
    pub min_distance: f64,
    pub violation_rate: f64,
    pub infeasibility_rate: f64,
    pub goal_fraction: f64,
    pub median_merge_time: Option<f64>,
    pub mean_tracking_error: Option<f64>,
    pub per_episode: Vec<EpisodeSummary>,
}

impl EvalSummary {
    pub fn from_batch(batch: &RolloutBatch, r_safe: f64) -> Self {
        let n = batch.episodes.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let safe = batch.episodes.iter().filter(|e| e.min_distance >= r_safe).count();
        let goals = batch.episodes.iter().filter(|e| e.reached_goal).count();
        let tracking: Vec<f64> = batch.episodes.iter().filter_map(|e| e.mean_tracking_error).collect();
        Self {
            episodes: n,
            r_safe,
            safe_fraction: frac(safe),
            min_distance: batch.episodes.iter().map(|e| e.min_distance).fold(f64::INFINITY, f64::min),
            violation_rate: batch.cbf_violation_rate(),
            infeasibility_rate: batch.infeasibility_rate(),
            goal_fraction: frac(goals),
            median_merge_time: median_merge_time(&batch.episodes),
            mean_tracking_error: (!tracking.is_empty()).then(|| mean(tracking.into_iter())),
            per_episode: batch.episodes.clone(),
        }
    }
}

/// Median merge time with unmerged episodes counted as +∞; `None` when
/// fewer than half the episodes merged.
pub fn median_merge_time(episodes: &[EpisodeSummary]) -> Option<f64> {
    if episodes.is_empty() {
        return None;
    }
    let mut t: Vec<f64> = episodes.iter().map(|e| e.merge_time.unwrap_or(f64::INFINITY)).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let m = if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) };
    m.is_finite().then_some(m)
}

/// Per-epoch hook: metrics record and the epoch's wall time in seconds.
pub type EpochHook<'a> = &'a mut dyn FnMut(&MetricsRecord, f64) -> Result<()>;

pub fn init_actor(cfg: &RunConfig, obs_dim: usize, rng: &RngStream) -> Result<PolicyParams> {
    let spec = MlpSpec::new(obs_dim, cfg.policy.hidden.clone(), 1);
    PolicyParams::init(spec, cfg.policy.init_log_std, cfg.policy.output_scale, &mut rng.substream("init/actor"))
}

pub fn init_critic(cfg: &RunConfig, obs_dim: usize, rng: &RngStream) -> Result<CriticParams> {
    let spec = MlpSpec::new(obs_dim, cfg.policy.hidden.clone(), 1);
    CriticParams::init(spec, &mut rng.substream("init/critic"))
}

/// Deterministic policy whose mean is `action` everywhere.
pub fn constant_actor(cfg: &RunConfig, action: f64) -> Result<PolicyParams> {
    let spec = MlpSpec::new(OBS_DIM, cfg.policy.hidden.clone(), 1);
    spec.validate()?;
    let layers = spec.layers();
    let last = layers.last().expect("at least one layer");
    let mut theta = vec![0.0; spec.param_count() + 1];
    theta[last.b_offset] = action;
    theta[spec.param_count()] = cfg.policy.init_log_std;
    PolicyParams::new(spec, theta)
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub actor: PolicyParams,
    pub critic: CriticParams,
    pub metrics: Vec<MetricsRecord>,
    pub eval: EvalSummary,
    pub eval_rollouts: Rollouts,
}

/// Deterministic evaluation from `t = 0` with seeded host offsets.
pub fn evaluate_online(actor: &PolicyParams, cfg: &RunConfig, record: bool) -> Result<(Rollouts, EvalSummary)> {
    let spec = RolloutSpec {
        episodes: cfg.online.eval_episodes,
        length: cfg.scenario.horizon,
        gamma: cfg.online.gamma,
        random_start: false,
        stochastic: false,
        record,
    };
    if spec.episodes == 0 {
        return Ok((Rollouts::default(), EvalSummary::from_batch(&RolloutBatch::default(), cfg.scenario.cbf.r_safe)));
    }
    let rollouts = collect_rollouts(actor, &cfg.scenario, &spec, &RngStream::new(cfg.seed).substream("eval"))?;
    let summary = EvalSummary::from_batch(&rollouts.batch, cfg.scenario.cbf.r_safe);
    Ok((rollouts, summary))
}

/// Online training: sample, fit the critic, take one constrained
/// trust-region step, repeat; then evaluate.
pub fn train_online(cfg: &RunConfig, hook: EpochHook<'_>) -> Result<OnlineResult> {
    cfg.validate()?;
    let rng = RngStream::new(cfg.seed);
    let mut actor = init_actor(cfg, OBS_DIM, &rng)?;
    let mut critic = init_critic(cfg, OBS_DIM, &rng)?;
    let spec = RolloutSpec {
        episodes: cfg.online.episodes,
        length: cfg.online.length,
        gamma: cfg.online.gamma,
        random_start: true,
        stochastic: true,
        record: false,
    };
    let mut metrics = Vec::with_capacity(cfg.online.epochs);
    for epoch in 0..cfg.online.epochs {
        let started = Instant::now();
        let mut rollouts = collect_rollouts(&actor, &cfg.scenario, &spec, &rng.substream(&format!("epoch/{epoch}")))?;
        let outcome = sapo_update(&mut rollouts.batch, &actor, &critic, &cfg.update)?;
        let mut rec = MetricsRecord::from_batch(epoch, "train", &rollouts.batch);
        info!(
            "epoch {epoch}: return {:.3}, min distance {:.2}, {:?} step, kl {:.2e}",
            rec.mean_return, rec.mean_min_distance, outcome.report.mode, outcome.report.kl
        );
        if let Some(d) = &outcome.report.diagnostic {
            warn!("epoch {epoch}: {d}");
        }
        rec.update = Some(outcome.report);
        actor = outcome.actor;
        critic = outcome.critic;
        hook(&rec, started.elapsed().as_secs_f64())?;
        metrics.push(rec);
    }
    let (eval_rollouts, eval) = evaluate_online(&actor, cfg, true)?;
    info!(
        "eval: safe {:.3}, min distance {:.2}, violation rate {:.4}, median merge {:?}",
        eval.safe_fraction, eval.min_distance, eval.violation_rate, eval.median_merge_time
    );
    Ok(OnlineResult {
        actor,
        critic,
        metrics,
        eval,
        eval_rollouts,
    })
}

#[derive(Debug, Clone)]
pub struct OfflineData {
    pub episodes: Vec<OfflineEpisode>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl OfflineData {
    fn pick(&self, idx: &[usize]) -> Vec<OfflineEpisode> {
        idx.iter().map(|&i| self.episodes[i].clone()).collect()
    }
}

/// Parses and extracts the configured dataset, or generates synthetic data
/// when none is configured, then splits by episode.
pub fn load_offline_data(cfg: &RunConfig) -> Result<OfflineData> {
    let rng = RngStream::new(cfg.seed);
    let off = &cfg.offline;
    let report = match &off.data {
        Some(path) => parse_file(path, &off.columns, off.units)?,
        None => {
            let data = generate_synthetic_dataset(&cfg.synthetic, &rng.substream("synthetic"))?;
            parse_trajectories(data.csv.as_bytes(), &off.columns, cfg.synthetic.units)?
        }
    };
    if !report.errors.is_empty() {
        warn!("{} rows skipped while parsing", report.errors.len());
    }
    let extraction = extract_merge_pairs(&report.records, &off.extract);
    let episodes: Vec<OfflineEpisode> = extraction
        .episodes
        .iter()
        .map(OfflineEpisode::from_merge)
        .filter(|e| e.len() >= 2)
        .collect();
    if episodes.is_empty() {
        return Err(Error::domain("no usable merge episodes in the offline data"));
    }
    let (train, val, test) = split_episodes(episodes.len(), off.train_fraction, off.val_fraction, &rng);
    info!(
        "offline data: {} episodes ({} train, {} val, {} test)",
        episodes.len(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(OfflineData {
        episodes,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub actor: PolicyParams,
    pub critic: CriticParams,
    pub metrics: Vec<MetricsRecord>,
    pub eval: EvalSummary,
    pub eval_rollouts: OfflineRollouts,
}

fn offline_eval(
    actor: &PolicyParams,
    cfg: &RunConfig,
    episodes: &[OfflineEpisode],
    stream: &str,
    record: bool,
) -> Result<OfflineRollouts> {
    let spec = OfflineRolloutSpec {
        trajectories: cfg.offline.eval_trajectories,
        length: cfg.offline.eval_length,
        gamma: cfg.offline.gamma,
        stochastic: false,
        record,
    };
    collect_offline_rollouts(actor, episodes, &cfg.offline.env, &spec, &RngStream::new(cfg.seed).substream(stream))
}

/// Offline training on dataset rollouts started at random frames. Each
/// epoch also scores the deterministic policy on a fixed validation set.
pub fn train_offline(cfg: &RunConfig, data: &OfflineData, hook: EpochHook<'_>) -> Result<OfflineResult> {
    cfg.validate()?;
    let rng = RngStream::new(cfg.seed);
    let train = data.pick(&data.train);
    let val = if data.val.is_empty() { train.clone() } else { data.pick(&data.val) };
    let test = if data.test.is_empty() { val.clone() } else { data.pick(&data.test) };
    let mut actor = init_actor(cfg, OFFLINE_OBS_DIM, &rng)?;
    let mut critic = init_critic(cfg, OFFLINE_OBS_DIM, &rng)?;
    let spec = OfflineRolloutSpec {
        trajectories: cfg.offline.trajectories,
        length: cfg.offline.length,
        gamma: cfg.offline.gamma,
        stochastic: true,
        record: false,
    };
    let mut metrics = Vec::with_capacity(cfg.offline.epochs);
    for epoch in 0..cfg.offline.epochs {
        let started = Instant::now();
        let mut rollouts =
            collect_offline_rollouts(&actor, &train, &cfg.offline.env, &spec, &rng.substream(&format!("epoch/{epoch}")))?;
        let outcome = sapo_update(&mut rollouts.batch, &actor, &critic, &cfg.update)?;
        let mut rec = MetricsRecord::from_batch(epoch, "train", &rollouts.batch);
        rec.update = Some(outcome.report);
        actor = outcome.actor;
        critic = outcome.critic;
        let validation = offline_eval(&actor, cfg, &val, "validation", false)?;
        rec.val_tracking_error = EvalSummary::from_batch(&validation.batch, 0.0).mean_tracking_error;
        info!(
            "epoch {epoch}: return {:.4}, validation tracking error {:.4}",
            rec.mean_return,
            rec.val_tracking_error.unwrap_or(f64::NAN)
        );
        hook(&rec, started.elapsed().as_secs_f64())?;
        metrics.push(rec);
    }
    let eval_rollouts = offline_eval(&actor, cfg, &test, "test", true)?;
    let eval = EvalSummary::from_batch(&eval_rollouts.batch, cfg.offline.env.cbf.r_safe);
    info!(
        "test: safe {:.3}, tracking error {:.4}",
        eval.safe_fraction,
        eval.mean_tracking_error.unwrap_or(f64::NAN)
    );
    Ok(OfflineResult {
        actor,
        critic,
        metrics,
        eval,
        eval_rollouts,
    })
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMING: &str = "timing.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const EVAL: &str = "eval.json";
pub const TRAJECTORIES: &str = "trajectories";

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fresh_trajectory_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join(TRAJECTORIES);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn episode_file(i: usize) -> String {
    format!("episode_{i:04}.csv")
}

fn write_online_trajectories(out: &Path, trajectories: &[Vec<TickRecord>], cfg: &RunConfig) -> Result<()> {
    let dir = fresh_trajectory_dir(out)?;
    for (i, ticks) in trajectories.iter().enumerate() {
        write_file(&dir.join(episode_file(i)), trajectory_csv(ticks, &cfg.scenario.cbf))?;
    }
    Ok(())
}

fn write_offline_trajectories(out: &Path, trajectories: &[Vec<OfflineTick>], cfg: &RunConfig) -> Result<()> {
    let dir = fresh_trajectory_dir(out)?;
    for (i, ticks) in trajectories.iter().enumerate() {
        write_file(&dir.join(episode_file(i)), offline_trajectory_csv(ticks, &cfg.offline.env.cbf))?;
    }
    Ok(())
}

fn write_eval(out: &Path, eval: &EvalSummary) -> Result<()> {
    write_file(&out.join(EVAL), serde_json::to_string_pretty(eval)? + "\n")
}

/// Executes `mode` with `cfg`, writing every output under `out`.
pub fn run(mode: Mode, cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(EFFECTIVE_CONFIG), cfg.to_toml()?)?;
    let mut metrics = JsonLines::create(out.join(METRICS))?;
    let mut timing = JsonLines::create(out.join(TIMING))?;
    let started = Instant::now();
    info!("{} (seed {}) -> {}", mode.name(), cfg.seed, out.display());

    match mode {
        Mode::TrainOnline | Mode::TrainOffline => {
            let mut hook = |rec: &MetricsRecord, wall: f64| -> Result<()> {
                metrics.push(rec)?;
                timing.push(&TimingRecord {
                    epoch: Some(rec.epoch),
                    phase: rec.phase.clone(),
                    wall_seconds: wall,
                })
            };
            if mode == Mode::TrainOnline {
                let res = train_online(cfg, &mut hook)?;
                finish_training(out, cfg, res.actor, res.critic, cfg.online.epochs)?;
                let rec = MetricsRecord::from_batch(cfg.online.epochs, "eval", &res.eval_rollouts.batch);
                metrics.push(&rec)?;
                write_eval(out, &res.eval)?;
                write_online_trajectories(out, &res.eval_rollouts.trajectories, cfg)?;
            } else {
                let data = load_offline_data(cfg)?;
                let res = train_offline(cfg, &data, &mut hook)?;
                finish_training(out, cfg, res.actor, res.critic, cfg.offline.epochs)?;
                let rec = MetricsRecord::from_batch(cfg.offline.epochs, "eval", &res.eval_rollouts.batch);
                metrics.push(&rec)?;
                write_eval(out, &res.eval)?;
                write_offline_trajectories(out, &res.eval_rollouts.trajectories, cfg)?;
            }
        }
        Mode::Eval | Mode::FilterOnly => {
            let actor = if mode == Mode::FilterOnly {
                constant_actor(cfg, cfg.online.filter_only_action)?
            } else if let Some(path) = &cfg.online.checkpoint {
                Checkpoint::load(path)?.actor
            } else {
                init_actor(cfg, OBS_DIM, &RngStream::new(cfg.seed))?
            };
            let (rollouts, eval) = evaluate_online(&actor, cfg, true)?;
            metrics.push(&MetricsRecord::from_batch(0, "eval", &rollouts.batch))?;
            write_eval(out, &eval)?;
            write_online_trajectories(out, &rollouts.trajectories, cfg)?;
        }
        Mode::ExtractDataset => {
            let path = cfg
                .offline
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("extract-dataset needs offline.data".into()))?;
            let report = parse_file(path, &cfg.offline.columns, cfg.offline.units)?;
            let extraction = extract_merge_pairs(&report.records, &cfg.offline.extract);
            write_extraction(out, &extraction, &report.errors)?;
            metrics.push(&serde_json::json!({
                "records": report.records.len(),
                "row_errors": report.errors.len(),
                "candidates": extraction.candidates,
                "episodes": extraction.episodes.len(),
                "dropped": extraction.dropped,
            }))?;
            info!("{} episodes from {} records", extraction.episodes.len(), report.records.len());
        }
        Mode::GenSynthetic => {
            let data = generate_synthetic_dataset(&cfg.synthetic, &RngStream::new(cfg.seed).substream("synthetic"))?;
            write_file(&out.join("synthetic.csv"), &data.csv)?;
            let planted: Vec<serde_json::Value> = data
                .planted
                .iter()
                .map(|(ego, frame)| serde_json::json!({ "ego_id": ego, "merge_frame": frame }))
                .collect();
            write_file(&out.join("planted.json"), serde_json::to_string_pretty(&planted)? + "\n")?;
            metrics.push(&serde_json::json!({
                "rows": data.csv.lines().count().saturating_sub(1),
                "planted_merges": data.planted.len(),
            }))?;
        }
    }
    timing.push(&TimingRecord {
        epoch: None,
        phase: "total".into(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn finish_training(out: &Path, cfg: &RunConfig, actor: PolicyParams, critic: CriticParams, epochs: usize) -> Result<()> {
    Checkpoint::new(actor, critic, epochs, cfg.seed).save(&out.join(CHECKPOINT))
}

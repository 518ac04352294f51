//! Config-driven experiment grids and their CSV outputs.
//!
//! A grid cell is one `(scheme, P_max, actor learning rate, seed)` tuple. Each
//! cell trains a policy, evaluates its mean action on held-out channel draws
//! and appends rows to `metrics.csv`. Evaluation draws depend only on the seed,
//! so cells that share a seed are compared on identical channels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{decode_action, Env, EnvConfig, Scheme};
use crate::error::{Error, Result};
use crate::ppo::{self, Feedback, GaussianPolicy, PpoConfig, TrainingOutcome};
use crate::precode::BeamformerSet;
use crate::rng;
use crate::semcodec::{Dictionary, SemanticBudget};

pub const SCHEMA_VERSION: u32 = 1;

fn default_rng() -> String {
    rng::RNG_ALGORITHM.to_string()
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::SsMgsc]
}

fn default_powers() -> Vec<f64> {
    vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
}

fn default_lrs() -> Vec<f64> {
    vec![1e-3]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_eval_steps() -> usize {
    200
}

/// Where the fixed budget of a BER sweep comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepBudget {
    /// Every tile and every word.
    Full,
    /// The trained policy's mean action on each evaluation draw.
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BerSweepConfig {
    /// Injected bit error rates; 0 gives the noiseless endpoint.
    pub grid: Vec<f64>,
    /// Channel draws per grid point.
    pub trials: usize,
    pub budget: SweepBudget,
}

impl Default for BerSweepConfig {
    fn default() -> Self {
        BerSweepConfig {
            grid: vec![0.0, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            trials: 200,
            budget: SweepBudget::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_rng")]
    pub rng_algorithm: String,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_powers")]
    pub power_grid_dbm: Vec<f64>,
    /// Actor learning rates.
    #[serde(default = "default_lrs")]
    pub learning_rate_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Evaluation steps per cell.
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Receiver dictionary; the built-in list when absent.
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub ber_sweep: BerSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            rng_algorithm: default_rng(),
            schemes: default_schemes(),
            power_grid_dbm: default_powers(),
            learning_rate_grid: default_lrs(),
            seeds: default_seeds(),
            eval_steps: default_eval_steps(),
            output_dir: None,
            dictionary: None,
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            ber_sweep: BerSweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        rng::check_algorithm(&self.rng_algorithm)?;
        if self.schemes.is_empty() {
            return Err(Error::config("schemes must not be empty"));
        }
        if self.power_grid_dbm.is_empty() || self.power_grid_dbm.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("power_grid_dbm must be a non-empty list of finite values"));
        }
        if self.learning_rate_grid.is_empty() || self.learning_rate_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("learning_rate_grid must be a non-empty list of values >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.eval_steps == 0 {
            return Err(Error::config("eval_steps must be >= 1"));
        }
        if self.ber_sweep.grid.is_empty() || self.ber_sweep.grid.iter().any(|b| !(0.0..=0.5).contains(b)) {
            return Err(Error::config("ber_sweep.grid must be a non-empty list within [0, 0.5]"));
        }
        if self.ber_sweep.trials == 0 {
            return Err(Error::config("ber_sweep.trials must be >= 1"));
        }
        self.env.validate()?;
        self.ppo.validate()
    }

    /// Every grid cell, scheme-major.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for &p_max_dbm in &self.power_grid_dbm {
                for &lr_actor in &self.learning_rate_grid {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            scheme,
                            p_max_dbm,
                            lr_actor,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn env_config(&self, cell: &Cell) -> EnvConfig {
        EnvConfig {
            p_max_dbm: cell.p_max_dbm,
            ..self.env.clone()
        }
    }

    pub fn ppo_config(&self, cell: &Cell) -> PpoConfig {
        PpoConfig {
            lr_actor: cell.lr_actor,
            seed: cell.seed,
            ..self.ppo.clone()
        }
    }

    fn dictionary_or_builtin(&self) -> Result<Dictionary> {
        match &self.dictionary {
            Some(p) => Dictionary::from_path(p),
            None => Ok(Dictionary::builtin()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub scheme: Scheme,
    pub p_max_dbm: f64,
    pub lr_actor: f64,
    pub seed: u64,
}

impl Cell {
    /// File-name stem, e.g. `SS-MGSC_p40_lr0.001_s3`.
    pub fn id(&self) -> String {
        format!("{}_p{}_lr{}_s{}", self.scheme, self.p_max_dbm, self.lr_actor, self.seed)
    }
}

/// One evaluation step under the mean action.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep {
    pub reward: f64,
    pub ses_per_user: Vec<f64>,
    pub ber_common: Option<f64>,
    pub ber_private: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub steps: Vec<EvalStep>,
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn mean_some(x: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = x.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

impl Evaluation {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Per-step SES summed over users.
    pub fn ses_totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.ses_per_user.iter().sum()).collect()
    }

    pub fn n_users(&self) -> usize {
        self.steps.first().map_or(0, |s| s.ses_per_user.len())
    }

    /// Mean SES per user per step.
    pub fn mean_ses(&self) -> f64 {
        mean(&self.ses_totals()) / self.n_users() as f64
    }

    pub fn ses_user_mean(&self, k: usize) -> f64 {
        mean(&self.steps.iter().map(|s| s.ses_per_user[k]).collect::<Vec<_>>())
    }

    /// Mean of the per-step measured common-stream BER over steps that sent bits.
    pub fn ber_common(&self) -> Option<f64> {
        mean_some(self.steps.iter().map(|s| s.ber_common))
    }

    pub fn ber_private(&self, k: usize) -> Option<f64> {
        mean_some(self.steps.iter().map(|s| s.ber_private[k]))
    }
}

fn make_env(cfg: &ExperimentConfig, env_cfg: EnvConfig, scheme: Scheme, seed: u64, eval: bool) -> Result<Env> {
    let env = if eval {
        Env::for_evaluation(env_cfg, scheme, seed)?
    } else {
        Env::new(env_cfg, scheme, seed)?
    };
    Ok(match &cfg.dictionary {
        Some(_) => env.with_dictionary(cfg.dictionary_or_builtin()?),
        None => env,
    })
}

/// Runs the mean action of `actor` for `steps` held-out steps.
pub fn evaluate_policy(actor: &GaussianPolicy, env: &mut Env, steps: usize) -> Result<Evaluation> {
    let mut state = env.reset()?;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = actor.mean(&state)?;
        let fb = Feedback::from(env.step(&a)?);
        out.push(EvalStep {
            reward: fb.reward,
            ber_common: rate(fb.common_bits),
            ber_private: fb.private_bits.iter().map(|c| rate(*c)).collect(),
            ses_per_user: fb.ses_per_user,
        });
        state = fb.next_state;
    }
    Ok(Evaluation { steps: out })
}

fn rate((flips, bits): (usize, usize)) -> Option<f64> {
    (bits > 0).then(|| flips as f64 / bits as f64)
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub cell: Cell,
    pub training: Option<TrainingOutcome>,
    pub evaluation: Evaluation,
}

impl CellReport {
    /// Mean per-step training reward over the first and last 10% of episodes.
    pub fn reward_first_last(&self) -> Option<(f64, f64)> {
        let r = self.training.as_ref()?.rewards();
        let n = (r.len() / 10).max(1);
        (r.len() >= 2).then(|| (mean(&r[..n]), mean(&r[r.len() - n..])))
    }
}

/// Trains and evaluates one cell.
pub fn train_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellReport> {
    let env_cfg = cfg.env_config(cell);
    let mut env = make_env(cfg, env_cfg.clone(), cell.scheme, cell.seed, false)?;
    let training = ppo::train(&mut env, &cfg.ppo_config(cell))?;
    let mut eval_env = make_env(cfg, env_cfg, cell.scheme, cell.seed, true)?;
    let evaluation = evaluate_policy(&training.actor, &mut eval_env, cfg.eval_steps)?;
    Ok(CellReport {
        cell: *cell,
        training: Some(training),
        evaluation,
    })
}

/// Evaluates a stored policy for one cell.
pub fn evaluate_cell(cfg: &ExperimentConfig, cell: &Cell, actor: &GaussianPolicy) -> Result<CellReport> {
    let mut env = make_env(cfg, cfg.env_config(cell), cell.scheme, cell.seed, true)?;
    Ok(CellReport {
        cell: *cell,
        training: None,
        evaluation: evaluate_policy(actor, &mut env, cfg.eval_steps)?,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Streams `metrics.csv` and `summary.csv`, flushing after every cell.
pub struct MetricsWriter {
    metrics: csv::Writer<fs::File>,
    summary: csv::Writer<fs::File>,
    n_users: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path, n_users: usize) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
        let users = |prefix: &'static str| (1..=n_users).map(move |k| format!("{prefix}{k}"));
        let mut h: Vec<String> = ["scheme", "p_max_dbm", "lr_actor", "seed", "phase", "episode", "reward", "ses_total"]
            .map(String::from)
            .to_vec();
        h.extend(users("ses_user_"));
        h.push("ber_common".into());
        h.extend(users("ber_private_user_"));
        metrics.write_record(&h)?;

        let mut h: Vec<String> = [
            "scheme",
            "p_max_dbm",
            "lr_actor",
            "seed",
            "eval_steps",
            "reward_mean",
            "reward_std",
            "ses_total_mean",
            "ses_total_std",
            "ses_mean_per_user",
        ]
        .map(String::from)
        .to_vec();
        h.extend(users("ses_user_").map(|c| format!("{c}_mean")));
        h.push("ber_common_mean".into());
        h.extend(users("ber_private_user_").map(|c| format!("{c}_mean")));
        h.push("train_reward_first10".into());
        h.push("train_reward_last10".into());
        summary.write_record(&h)?;
        metrics.flush()?;
        summary.flush()?;
        Ok(MetricsWriter {
            metrics,
            summary,
            n_users,
        })
    }

    pub fn write(&mut self, r: &CellReport) -> Result<()> {
        let c = &r.cell;
        let key = [c.scheme.to_string(), c.p_max_dbm.to_string(), c.lr_actor.to_string(), c.seed.to_string()];
        let mut row = |phase: &str, episode: usize, reward: f64, ses: &[f64], bc: Option<f64>, bp: &[Option<f64>]| -> Result<()> {
            let mut rec: Vec<String> = key.to_vec();
            rec.push(phase.into());
            rec.push(episode.to_string());
            rec.push(reward.to_string());
            rec.push(ses.iter().sum::<f64>().to_string());
            rec.extend((0..self.n_users).map(|k| ses.get(k).map_or_else(String::new, f64::to_string)));
            rec.push(fmt_opt(bc));
            rec.extend((0..self.n_users).map(|k| fmt_opt(bp.get(k).copied().flatten())));
            self.metrics.write_record(&rec)?;
            Ok(())
        };
        if let Some(t) = &r.training {
            for e in &t.log {
                row("train", e.episode, e.mean_reward, &e.ses_per_user, e.ber_common, &e.ber_private)?;
            }
        }
        for (i, s) in r.evaluation.steps.iter().enumerate() {
            row("eval", i, s.reward, &s.ses_per_user, s.ber_common, &s.ber_private)?;
        }

        let ev = &r.evaluation;
        let totals = ev.ses_totals();
        let rewards = ev.rewards();
        let mut rec: Vec<String> = key.to_vec();
        rec.push(ev.steps.len().to_string());
        rec.push(mean(&rewards).to_string());
        rec.push(std_dev(&rewards).to_string());
        rec.push(mean(&totals).to_string());
        rec.push(std_dev(&totals).to_string());
        rec.push(ev.mean_ses().to_string());
        rec.extend((0..self.n_users).map(|k| ev.ses_user_mean(k).to_string()));
        rec.push(fmt_opt(ev.ber_common()));
        rec.extend((0..self.n_users).map(|k| fmt_opt(ev.ber_private(k))));
        let fl = r.reward_first_last();
        rec.push(fmt_opt(fl.map(|x| x.0)));
        rec.push(fmt_opt(fl.map(|x| x.1)));
        self.summary.write_record(&rec)?;
        self.metrics.flush()?;
        self.summary.flush()?;
        Ok(())
    }
}

/// Writes the per-episode training log.
pub fn write_training_log(path: &Path, t: &TrainingOutcome) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "mean_reward", "mean_ses_per_user", "power_violation_rate", "ses_violation_rate"])?;
    for e in &t.log {
        w.write_record([
            e.episode.to_string(),
            e.mean_reward.to_string(),
            e.mean_ses_per_user.to_string(),
            e.power_violation_rate.to_string(),
            e.ses_violation_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_path(out: &Path, cell: &Cell) -> PathBuf {
    out.join("checkpoints").join(format!("{}.ckpt", cell.id()))
}

pub fn training_log_path(out: &Path, cell: &Cell) -> PathBuf {
    out.join("logs").join(format!("{}.csv", cell.id()))
}

/// Trains every cell, writing checkpoints, training logs, `metrics.csv` and
/// `summary.csv` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CellReport>> {
    cfg.validate()?;
    let mut writer = MetricsWriter::create(out, cfg.env.n_users)?;
    let mut reports = Vec::new();
    for cell in cfg.cells() {
        let report = train_cell(cfg, &cell)?;
        let t = report.training.as_ref().expect("training outcome");
        ppo::save_checkpoint(&checkpoint_path(out, &cell), &t.actor, &t.critic)?;
        write_training_log(&training_log_path(out, &cell), t)?;
        writer.write(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Evaluates the stored checkpoint of every cell.
pub fn run_evaluation(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CellReport>> {
    cfg.validate()?;
    let mut writer = MetricsWriter::create(out, cfg.env.n_users)?;
    let mut reports = Vec::new();
    for cell in cfg.cells() {
        let (actor, _) = ppo::load_checkpoint(&checkpoint_path(out, &cell))?;
        let report = evaluate_cell(cfg, &cell, &actor)?;
        writer.write(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Across-seed aggregate for one `(scheme, power, lr)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerPoint {
    pub scheme: Scheme,
    pub p_max_dbm: f64,
    pub lr_actor: f64,
    pub ses: Vec<f64>,
    pub ber_common: Vec<f64>,
    pub ber_private: Vec<Vec<f64>>,
}

pub fn aggregate_power(reports: &[CellReport], n_users: usize) -> Vec<PowerPoint> {
    let mut out: Vec<PowerPoint> = Vec::new();
    for r in reports {
        let c = &r.cell;
        let idx = match out
            .iter()
            .position(|p| p.scheme == c.scheme && p.p_max_dbm == c.p_max_dbm && p.lr_actor == c.lr_actor)
        {
            Some(i) => i,
            None => {
                out.push(PowerPoint {
                    scheme: c.scheme,
                    p_max_dbm: c.p_max_dbm,
                    lr_actor: c.lr_actor,
                    ses: Vec::new(),
                    ber_common: Vec::new(),
                    ber_private: vec![Vec::new(); n_users],
                });
                out.len() - 1
            }
        };
        let p = &mut out[idx];
        p.ses.push(r.evaluation.mean_ses());
        p.ber_common.extend(r.evaluation.ber_common());
        for k in 0..n_users {
            p.ber_private[k].extend(r.evaluation.ber_private(k));
        }
    }
    out
}

pub fn write_power_sweep(path: &Path, points: &[PowerPoint], n_users: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h: Vec<String> = ["scheme", "p_max_dbm", "lr_actor", "n_seeds", "ses_mean", "ses_std", "ber_common_mean"]
        .map(String::from)
        .to_vec();
    h.extend((1..=n_users).map(|k| format!("ber_private_user_{k}_mean")));
    w.write_record(&h)?;
    let m = |v: &[f64]| if v.is_empty() { String::new() } else { mean(v).to_string() };
    for p in points {
        let mut rec = vec![
            p.scheme.to_string(),
            p.p_max_dbm.to_string(),
            p.lr_actor.to_string(),
            p.ses.len().to_string(),
            mean(&p.ses).to_string(),
            std_dev(&p.ses).to_string(),
            m(&p.ber_common),
        ];
        rec.extend(p.ber_private.iter().map(|v| m(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `SS ≥ SegS ≥ max(O, T)` on mean evaluation SES.
pub fn scheme_order_holds(ses: impl Fn(Scheme) -> f64) -> bool {
    let ss = ses(Scheme::SsMgsc);
    let segs = ses(Scheme::SegsMgsc);
    ss >= segs && segs >= ses(Scheme::OMgsc).max(ses(Scheme::TMgsc))
}

/// Writes `scheme_comparison.csv`: one row per `(power, lr, seed)` with the
/// mean SES of every scheme and whether the expected ordering holds.
pub fn write_scheme_comparison(path: &Path, reports: &[CellReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h: Vec<String> = ["p_max_dbm", "lr_actor", "seed"].map(String::from).to_vec();
    h.extend(Scheme::ALL.iter().map(|s| format!("ses_{s}")));
    h.push("ordering_holds".into());
    w.write_record(&h)?;
    let mut keys: Vec<(f64, f64, u64)> = Vec::new();
    for r in reports {
        let k = (r.cell.p_max_dbm, r.cell.lr_actor, r.cell.seed);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (p, lr, seed) in keys {
        let find = |s: Scheme| {
            reports
                .iter()
                .find(|r| r.cell.scheme == s && r.cell.p_max_dbm == p && r.cell.lr_actor == lr && r.cell.seed == seed)
                .map(|r| r.evaluation.mean_ses())
        };
        let vals: Vec<Option<f64>> = Scheme::ALL.iter().map(|&s| find(s)).collect();
        let mut rec = vec![p.to_string(), lr.to_string(), seed.to_string()];
        rec.extend(vals.iter().map(|v| fmt_opt(*v)));
        let order = if vals.iter().all(Option::is_some) {
            scheme_order_holds(|s| find(s).unwrap_or(f64::NAN)).to_string()
        } else {
            String::new()
        };
        rec.push(order);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// SES per user at one injected BER.
#[derive(Debug, Clone, PartialEq)]
pub struct BerPoint {
    pub scheme: Scheme,
    pub seed: u64,
    pub ber: f64,
    /// Scores per user, one per trial.
    pub ses: Vec<Vec<f64>>,
}

impl BerPoint {
    pub fn user_mean(&self, k: usize) -> f64 {
        mean(&self.ses[k])
    }
}

/// Holds the budget fixed per channel draw and sweeps the injected BER.
///
/// With `actor = None` the budget is every tile and every word.
pub fn sweep_ber_vs_ses(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    seed: u64,
    actor: Option<&GaussianPolicy>,
) -> Result<Vec<BerPoint>> {
    cfg.validate()?;
    let env_cfg = EnvConfig {
        p_max_dbm: cfg.power_grid_dbm[0],
        ..cfg.env.clone()
    };
    let k = env_cfg.n_users;
    let mut env = make_env(cfg, env_cfg.clone(), scheme, seed, true)?;
    let mut points: Vec<BerPoint> = cfg
        .ber_sweep
        .grid
        .iter()
        .map(|&ber| BerPoint {
            scheme,
            seed,
            ber,
            ses: vec![Vec::with_capacity(cfg.ber_sweep.trials); k],
        })
        .collect();
    let mut state = env.reset()?;
    for _ in 0..cfg.ber_sweep.trials {
        let (beams, budget) = match actor {
            Some(a) => decode_action(&a.mean(&state)?, &env_cfg)?,
            None => (
                BeamformerSet::zeros(k, env_cfg.n_t),
                SemanticBudget::new(env_cfg.m_max, vec![env_cfg.n_max; k], env_cfg.m_max, env_cfg.n_max)?,
            ),
        };
        for p in points.iter_mut() {
            let scores = env.score_with_ber(&beams, &budget, p.ber)?;
            for (u, s) in scores.iter().enumerate() {
                p.ses[u].push(s.total);
            }
        }
        state = env.advance()?;
    }
    Ok(points)
}

pub fn write_ber_sweep(path: &Path, points: &[BerPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scheme", "seed", "ber", "user", "trials", "ses_mean", "ses_std"])?;
    for p in points {
        for (u, v) in p.ses.iter().enumerate() {
            w.write_record([
                p.scheme.to_string(),
                p.seed.to_string(),
                p.ber.to_string(),
                (u + 1).to_string(),
                v.len().to_string(),
                mean(v).to_string(),
                std_dev(v).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// BER sweep for every scheme and seed. In policy mode each cell at the first
/// power and learning rate reuses its checkpoint under `out` when present and
/// trains otherwise.
pub fn run_ber_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BerPoint>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut all = Vec::new();
    for &scheme in &cfg.schemes {
        for &seed in &cfg.seeds {
            let actor = match cfg.ber_sweep.budget {
                SweepBudget::Full => None,
                SweepBudget::Policy => {
                    let cell = Cell {
                        scheme,
                        p_max_dbm: cfg.power_grid_dbm[0],
                        lr_actor: cfg.learning_rate_grid[0],
                        seed,
                    };
                    let path = checkpoint_path(out, &cell);
                    if path.exists() {
                        Some(ppo::load_checkpoint(&path)?.0)
                    } else {
                        let mut env = make_env(cfg, cfg.env_config(&cell), scheme, seed, false)?;
                        let t = ppo::train(&mut env, &cfg.ppo_config(&cell))?;
                        ppo::save_checkpoint(&path, &t.actor, &t.critic)?;
                        write_training_log(&training_log_path(out, &cell), &t)?;
                        Some(t.actor)
                    }
                }
            };
            all.extend(sweep_ber_vs_ses(cfg, scheme, seed, actor.as_ref())?);
        }
    }
    write_ber_sweep(&out.join("ber_sweep.csv"), &all)?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            power_grid_dbm: vec![30.0],
            seeds: vec![1],
            eval_steps: 8,
            ppo: PpoConfig {
                max_episodes: 3,
                buffer_capacity: 32,
                minibatch_size: 16,
                epochs_per_update: 2,
                hidden: vec![8],
                ..PpoConfig::default()
            },
            ber_sweep: BerSweepConfig {
                grid: vec![0.0, 1e-2],
                trials: 3,
                budget: SweepBudget::Full,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_and_rejections() {
        let c = tiny();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\nbogus = 3\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\n[env]\nn_user = 3\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\nseeds = []\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\nrng_algorithm = \"pcg\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\nschemes = [\"JPEG\"]\n").is_err());
        let c = ExperimentConfig::from_toml_str("schema_version = 1\nschemes = [\"T-MGSC\", \"SS-MGSC\"]\n").unwrap();
        assert_eq!(c.schemes, vec![Scheme::TMgsc, Scheme::SsMgsc]);
        assert_eq!(c.cells().len(), 2 * 6 * 5);
    }

    #[test]
    fn statistics() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(std_dev(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(std_dev(&[4.0]), 0.0);
    }

    #[test]
    fn ordering_rule() {
        let ses = |s: Scheme| match s {
            Scheme::SsMgsc => 1.6,
            Scheme::SegsMgsc => 1.5,
            Scheme::OMgsc => 1.4,
            Scheme::TMgsc => 1.45,
        };
        assert!(scheme_order_holds(ses));
        assert!(!scheme_order_holds(|s| if s == Scheme::TMgsc { 1.55 } else { ses(s) }));
    }

    #[test]
    fn ber_zero_is_noiseless() {
        let c = tiny();
        let pts = sweep_ber_vs_ses(&c, Scheme::SsMgsc, 0, None).unwrap();
        let best = c.env.surrogate.upper_bound(1.0, 1.0);
        for u in 0..3 {
            assert!(pts[0].ses[u].iter().all(|s| (s - best).abs() < 1e-12));
            assert!(pts[1].user_mean(u) < pts[0].user_mean(u));
        }
    }
}

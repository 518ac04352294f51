//! The downlink as a decision process.
//!
//! State: `[Re h_1..h_K, Im h_1..h_K, P_max, I_th,1..K]`, length `2·N_t·K + 1 + K`.
//! Action: `[Re w_c, Im w_c, Re w_1..w_K, Im w_1..w_K, n_c, n_p,1..K]`, length
//! `2·N_t + 2·N_t·K + 1 + K`, unbounded; [`decode_action`] squashes it with
//! `tanh`. Each step scores one channel realization, then redraws the
//! channels i.i.d. for the next state.

use num_complex::Complex64;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::channel::{self, dbm_to_watts, draw_channels, ChannelSet, PathLossParams};
use crate::error::{Error, Result};
use crate::precode::{self, BeamformerSet, SinrReport};
use crate::rng::{self, SimRng};
use crate::semcodec::{
    self, ber_from_sinr, synthetic_scene_map, BitChannelModel, Dictionary, MapCodec, MapGeometry,
    Modulation, PartialMap, SemanticBudget, SemanticMap, TextUnit,
};
use crate::ses::{DeliveredArtifacts, SesEvaluator, SesScore, SurrogateEvaluator, SurrogateParams};

/// Transmission scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Semantic splitting: one-hot map on the common stream, text on private streams.
    #[serde(rename = "SS-MGSC")]
    SsMgsc,
    /// As SS-MGSC with the map sent as binary class labels.
    #[serde(rename = "SegS-MGSC")]
    SegsMgsc,
    /// No common stream; each user receives the map on its private stream, no text.
    #[serde(rename = "O-MGSC")]
    OMgsc,
    /// No common stream; each user receives its text on its private stream, no map.
    #[serde(rename = "T-MGSC")]
    TMgsc,
}

/// Which stream, if any, carries the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapCarrier {
    Common,
    Private,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeLayout {
    pub common_stream: bool,
    pub map: MapCarrier,
    pub map_codec: MapCodec,
    pub text: bool,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::SsMgsc, Scheme::SegsMgsc, Scheme::OMgsc, Scheme::TMgsc];

    pub fn layout(self) -> SchemeLayout {
        match self {
            Scheme::SsMgsc => SchemeLayout {
                common_stream: true,
                map: MapCarrier::Common,
                map_codec: MapCodec::OneHot,
                text: true,
            },
            Scheme::SegsMgsc => SchemeLayout {
                common_stream: true,
                map: MapCarrier::Common,
                map_codec: MapCodec::BinaryLabel,
                text: true,
            },
            Scheme::OMgsc => SchemeLayout {
                common_stream: false,
                map: MapCarrier::Private,
                map_codec: MapCodec::OneHot,
                text: false,
            },
            Scheme::TMgsc => SchemeLayout {
                common_stream: false,
                map: MapCarrier::Absent,
                map_codec: MapCodec::OneHot,
                text: true,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SsMgsc => "SS-MGSC",
            Scheme::SegsMgsc => "SegS-MGSC",
            Scheme::OMgsc => "O-MGSC",
            Scheme::TMgsc => "T-MGSC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scheme {s:?}")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_prompts() -> Vec<String> {
    vec![
        "rainy intersection with wet asphalt and red taillights reflections".into(),
        "pedestrians with umbrellas waiting at the crosswalk near buildings".into(),
        "white bus turning left through heavy rain under streetlights".into(),
    ]
}

/// Environment parameters. Powers are in dBm at this boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_users: usize,
    pub n_t: usize,
    pub p_max_dbm: f64,
    /// Power used to normalize the `P_max` state entry.
    pub p_max_ref_dbm: f64,
    /// One SES threshold per user, or a single value for all users.
    pub ses_threshold: Vec<f64>,
    pub alpha_pen: f64,
    pub beta_pen: f64,
    /// Common budget ceiling `M` (tiles).
    pub m_max: usize,
    /// Private budget ceiling `N` (words).
    pub n_max: usize,
    pub steps_per_episode: usize,
    pub distances_m: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_classes: usize,
    pub scene_seed: u64,
    pub prompts: Vec<String>,
    pub path_loss: PathLossParams,
    pub surrogate: SurrogateParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_users: 3,
            n_t: 8,
            p_max_dbm: 40.0,
            p_max_ref_dbm: 60.0,
            ses_threshold: vec![1.2],
            alpha_pen: 10.0,
            beta_pen: 10.0,
            m_max: 16,
            n_max: 8,
            steps_per_episode: 32,
            distances_m: vec![30.0, 100.0, 400.0],
            grid_h: 48,
            grid_w: 64,
            n_classes: 8,
            scene_seed: 2024,
            prompts: default_prompts(),
            path_loss: PathLossParams::default(),
            surrogate: SurrogateParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_users;
        if k == 0 || self.n_t == 0 {
            return Err(Error::config("n_users and n_t must be >= 1"));
        }
        if !self.p_max_dbm.is_finite() || !self.p_max_ref_dbm.is_finite() {
            return Err(Error::config("p_max_dbm must be finite"));
        }
        if self.ses_threshold.len() != 1 && self.ses_threshold.len() != k {
            return Err(Error::config("ses_threshold needs 1 or n_users entries"));
        }
        if self.ses_threshold.iter().any(|t| !(0.0..=2.0).contains(t)) {
            return Err(Error::config("SES thresholds must lie in [0, 2]"));
        }
        if !(self.alpha_pen >= 0.0 && self.beta_pen >= 0.0) {
            return Err(Error::config("penalty weights must be >= 0"));
        }
        if self.m_max == 0 || self.n_max == 0 || self.steps_per_episode == 0 {
            return Err(Error::config("m_max, n_max and steps_per_episode must be >= 1"));
        }
        if self.distances_m.len() != k {
            return Err(Error::config(format!("need {k} user distances, got {}", self.distances_m.len())));
        }
        if self.distances_m.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config("user distances must be > 0"));
        }
        if self.prompts.len() != k {
            return Err(Error::config(format!("need {k} prompts, got {}", self.prompts.len())));
        }
        if self.prompts.iter().any(|p| p.split_whitespace().next().is_none()) {
            return Err(Error::config("prompts must not be empty"));
        }
        self.surrogate.validate()?;
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<MapGeometry> {
        MapGeometry::new(self.grid_h, self.grid_w, self.n_classes, self.m_max)
    }

    pub fn p_max_w(&self) -> f64 {
        dbm_to_watts(self.p_max_dbm)
    }

    pub fn thresholds(&self) -> Vec<f64> {
        if self.ses_threshold.len() == 1 {
            vec![self.ses_threshold[0]; self.n_users]
        } else {
            self.ses_threshold.clone()
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_t * self.n_users + 1 + self.n_users
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_t + 2 * self.n_t * self.n_users + 1 + self.n_users
    }

    /// Amplitude of the strongest (nearest) user's path loss.
    pub fn channel_scale(&self) -> Result<f64> {
        let d_min = self.distances_m.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(channel::path_loss_gain(d_min, &self.path_loss)?.sqrt())
    }

    /// Per-component beamformer amplitude; all components at full scale use
    /// exactly `P_max`.
    pub fn beam_scale(&self) -> f64 {
        (self.p_max_w() / (2 * self.n_t * (self.n_users + 1)) as f64).sqrt()
    }
}

/// Flat learner input.
pub type StateVector = Vec<f64>;

/// Flat learner output, before squashing.
pub type ActionVector = Vec<f64>;

pub fn encode_state(channels: &ChannelSet, cfg: &EnvConfig) -> Result<StateVector> {
    if channels.n_users() != cfg.n_users {
        return Err(Error::dim("users in channel set", cfg.n_users, channels.n_users()));
    }
    if channels.per_user.iter().any(|h| h.len() != cfg.n_t) {
        return Err(Error::dim("antennas in channel set", cfg.n_t, channels.n_antennas()));
    }
    let scale = cfg.channel_scale()?;
    let mut s = Vec::with_capacity(cfg.state_dim());
    s.extend(channels.per_user.iter().flatten().map(|h| h.re / scale));
    s.extend(channels.per_user.iter().flatten().map(|h| h.im / scale));
    s.push(cfg.p_max_w() / dbm_to_watts(cfg.p_max_ref_dbm));
    s.extend(cfg.thresholds());
    Ok(s)
}

/// Recovers the channel vectors from a state.
pub fn decode_state_channels(state: &[f64], cfg: &EnvConfig) -> Result<Vec<Vec<Complex64>>> {
    if state.len() != cfg.state_dim() {
        return Err(Error::dim("state length", cfg.state_dim(), state.len()));
    }
    let scale = cfg.channel_scale()?;
    let half = cfg.n_t * cfg.n_users;
    Ok((0..cfg.n_users)
        .map(|k| {
            (0..cfg.n_t)
                .map(|i| {
                    let j = k * cfg.n_t + i;
                    Complex64::new(state[j] * scale, state[half + j] * scale)
                })
                .collect()
        })
        .collect())
}

/// `round((a + 1)/2 · max)` clamped to `[0, max]`, for `a` in `[−1, 1]`.
pub fn quantize_budget(squashed: f64, max: usize) -> usize {
    let n = ((squashed + 1.0) / 2.0 * max as f64).round();
    n.clamp(0.0, max as f64) as usize
}

/// Squashes the raw action with `tanh`, scales beamformer components by
/// [`EnvConfig::beam_scale`] and quantizes the budget entries.
pub fn decode_action(action: &[f64], cfg: &EnvConfig) -> Result<(BeamformerSet, SemanticBudget)> {
    if action.len() != cfg.action_dim() {
        return Err(Error::dim("action length", cfg.action_dim(), action.len()));
    }
    let (n_t, k) = (cfg.n_t, cfg.n_users);
    let scale = cfg.beam_scale();
    let sq = |i: usize| action[i].tanh();
    let beam = |re0: usize, im0: usize| -> Vec<Complex64> {
        (0..n_t)
            .map(|i| Complex64::new(scale * sq(re0 + i), scale * sq(im0 + i)))
            .collect()
    };
    let common = beam(0, n_t);
    let base = 2 * n_t;
    let private = (0..k)
        .map(|u| beam(base + u * n_t, base + k * n_t + u * n_t))
        .collect();
    let b0 = 2 * n_t + 2 * n_t * k;
    let n_c = quantize_budget(sq(b0), cfg.m_max);
    let n_p = (0..k).map(|u| quantize_budget(sq(b0 + 1 + u), cfg.n_max)).collect();
    Ok((BeamformerSet { common, private }, SemanticBudget::new(n_c, n_p, cfg.m_max, cfg.n_max)?))
}

/// `Σ_k f_k + α·min(0, P_max − P) + β·Σ_k min(0, f_k − I_th,k)`.
pub fn reward_from_components(
    ses_totals: &[f64],
    power_slack: f64,
    ses_slacks: &[f64],
    alpha: f64,
    beta: f64,
) -> f64 {
    let objective: f64 = ses_totals.iter().sum();
    let power_term = alpha * power_slack.min(0.0);
    let ses_term = beta * ses_slacks.iter().map(|s| s.min(0.0)).sum::<f64>();
    objective + power_term + ses_term
}

/// `Σ_l γ^l r_l`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc))
}

/// Analytic and measured bit error rates, per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    /// BER implied by the SINR of the stream that carries the map.
    pub map_ber: Vec<f64>,
    /// BER implied by the private SINR.
    pub text_ber: Vec<f64>,
    /// Flipped map bits and bits sent, per user.
    pub map_bits: Vec<(usize, usize)>,
    /// Flipped text bits and bits sent, per user.
    pub text_bits: Vec<(usize, usize)>,
    /// Whether the map rode on the common stream.
    pub map_on_common: bool,
}

impl BerReport {
    fn pooled(counts: &[(usize, usize)]) -> Option<f64> {
        let (e, n) = counts.iter().fold((0, 0), |(e, n), (a, b)| (e + a, n + b));
        (n > 0).then(|| e as f64 / n as f64)
    }

    /// Measured map-stream BER pooled over users, `None` if nothing was sent.
    pub fn measured_map(&self) -> Option<f64> {
        Self::pooled(&self.map_bits)
    }

    pub fn measured_text(&self) -> Option<f64> {
        Self::pooled(&self.text_bits)
    }

    /// Flipped and sent bits on the common stream, per user.
    pub fn common_counts(&self) -> Vec<(usize, usize)> {
        if self.map_on_common {
            self.map_bits.clone()
        } else {
            vec![(0, 0); self.map_bits.len()]
        }
    }

    /// Flipped and sent bits on each user's private stream.
    pub fn private_counts(&self) -> Vec<(usize, usize)> {
        self.text_bits
            .iter()
            .zip(&self.map_bits)
            .map(|(t, m)| if self.map_on_common { *t } else { (t.0 + m.0, t.1 + m.1) })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub per_user_ses: Vec<SesScore>,
    pub power_used: f64,
    /// `P_max − power_used`.
    pub power_slack: f64,
    /// `f_k − I_th,k`.
    pub ses_slacks: Vec<f64>,
    pub budget: SemanticBudget,
    pub sinr: SinrReport,
    pub ber_report: BerReport,
    pub next_state: StateVector,
    pub done: bool,
}

impl StepOutcome {
    pub fn ses_totals(&self) -> Vec<f64> {
        self.per_user_ses.iter().map(|s| s.total).collect()
    }

    pub fn objective(&self) -> f64 {
        self.per_user_ses.iter().map(|s| s.total).sum()
    }

    pub fn power_violation(&self) -> f64 {
        (-self.power_slack).max(0.0)
    }

    pub fn ses_shortfall(&self) -> f64 {
        self.ses_slacks.iter().map(|s| (-s).max(0.0)).sum()
    }

    /// The reward recomputed from the logged components.
    pub fn recompute_reward(&self, alpha: f64, beta: f64) -> f64 {
        reward_from_components(&self.ses_totals(), self.power_slack, &self.ses_slacks, alpha, beta)
    }
}

/// Per-user decoded artifacts of one step.
#[derive(Debug, Clone)]
pub struct Reception {
    pub map: Option<PartialMap>,
    pub text: Option<TextUnit>,
}

/// Assembled environment: channel model, codecs, evaluator and RNG streams.
pub struct Env {
    cfg: EnvConfig,
    scheme: Scheme,
    layout: SchemeLayout,
    geom: MapGeometry,
    map: SemanticMap,
    prompts: Vec<TextUnit>,
    dictionary: Dictionary,
    evaluator: Box<dyn SesEvaluator + Send + Sync>,
    sigma2: f64,
    channel_rng: SimRng,
    transport_rng: SimRng,
    channels: ChannelSet,
    step_in_episode: usize,
    last_reception: Vec<Reception>,
}

impl Env {
    pub fn new(cfg: EnvConfig, scheme: Scheme, seed: u64) -> Result<Self> {
        Self::with_streams(
            cfg,
            scheme,
            rng::stream(seed, rng::streams::CHANNEL),
            rng::stream(seed, rng::streams::TRANSPORT),
        )
    }

    /// Environment for held-out evaluation: separate channel and transport streams.
    pub fn for_evaluation(cfg: EnvConfig, scheme: Scheme, seed: u64) -> Result<Self> {
        Self::with_streams(
            cfg,
            scheme,
            rng::stream(seed, rng::streams::EVAL_CHANNEL),
            rng::stream(seed, rng::streams::EVAL_TRANSPORT),
        )
    }

    fn with_streams(cfg: EnvConfig, scheme: Scheme, mut channel_rng: SimRng, transport_rng: SimRng) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.geometry()?;
        let map = synthetic_scene_map(&geom, cfg.scene_seed);
        let prompts = cfg.prompts.iter().map(|p| TextUnit::new(p.to_lowercase())).collect();
        let sigma2 = channel::noise_power(&cfg.path_loss);
        let channels = draw_channels(&cfg.distances_m, cfg.n_t, &cfg.path_loss, channel_rng.next_u64())?;
        let evaluator = Box::new(SurrogateEvaluator {
            params: cfg.surrogate.clone(),
        });
        Ok(Env {
            layout: scheme.layout(),
            scheme,
            geom,
            map,
            prompts,
            dictionary: Dictionary::builtin(),
            evaluator,
            sigma2,
            channel_rng,
            transport_rng,
            channels,
            step_in_episode: 0,
            last_reception: Vec::new(),
            cfg,
        })
    }

    pub fn with_dictionary(mut self, dictionary: Dictionary) -> Self {
        self.dictionary = dictionary;
        self
    }

    /// Replaces the SES evaluator (the surrogate by default).
    pub fn with_evaluator(mut self, evaluator: Box<dyn SesEvaluator + Send + Sync>) -> Self {
        self.evaluator = evaluator;
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn map(&self) -> &SemanticMap {
        &self.map
    }

    pub fn geometry(&self) -> &MapGeometry {
        &self.geom
    }

    pub fn prompts(&self) -> &[TextUnit] {
        &self.prompts
    }

    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn noise_power(&self) -> f64 {
        self.sigma2
    }

    /// Decoded artifacts of the most recent step.
    pub fn last_reception(&self) -> &[Reception] {
        &self.last_reception
    }

    pub fn state(&self) -> Result<StateVector> {
        encode_state(&self.channels, &self.cfg)
    }

    /// Starts a new episode on a fresh channel draw.
    pub fn reset(&mut self) -> Result<StateVector> {
        self.redraw()?;
        self.step_in_episode = 0;
        self.state()
    }

    fn redraw(&mut self) -> Result<()> {
        let seed = self.channel_rng.next_u64();
        self.channels = draw_channels(&self.cfg.distances_m, self.cfg.n_t, &self.cfg.path_loss, seed)?;
        Ok(())
    }

    /// Applies scheme restrictions to a decoded action.
    pub fn restrict(&self, mut beams: BeamformerSet, mut budget: SemanticBudget) -> (BeamformerSet, SemanticBudget) {
        if !self.layout.common_stream {
            beams.common.iter_mut().for_each(|w| *w = Complex64::default());
        }
        if self.layout.map == MapCarrier::Absent {
            budget.n_c = 0;
        }
        if !self.layout.text {
            budget.n_p.iter_mut().for_each(|n| *n = 0);
        }
        (beams, budget)
    }

    /// Scores `action` on the current channels, then advances to a new draw.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (beams, budget) = decode_action(action, &self.cfg)?;
        let (beams, budget) = self.restrict(beams, budget);
        let sinr = precode::sinr_report(&self.channels, &beams, self.sigma2)?;
        let (scores, ber_report, reception) = self.transport_and_score(&sinr, &budget, None)?;

        let power_used = precode::total_power(&beams);
        let power_slack = self.cfg.p_max_w() - power_used;
        let thresholds = self.cfg.thresholds();
        let ses_slacks: Vec<f64> = scores.iter().zip(&thresholds).map(|(s, t)| s.total - t).collect();
        let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
        let reward = reward_from_components(&totals, power_slack, &ses_slacks, self.cfg.alpha_pen, self.cfg.beta_pen);

        self.last_reception = reception;
        self.redraw()?;
        self.step_in_episode += 1;
        let done = self.step_in_episode >= self.cfg.steps_per_episode;
        Ok(StepOutcome {
            reward,
            per_user_ses: scores,
            power_used,
            power_slack,
            ses_slacks,
            budget,
            sinr,
            ber_report,
            next_state: self.state()?,
            done,
        })
    }

    /// Sends the payloads for `budget` and scores every user.
    ///
    /// `forced_ber` overrides the SINR-derived flip rate on every stream.
    pub fn transport_and_score(
        &mut self,
        sinr: &SinrReport,
        budget: &SemanticBudget,
        forced_ber: Option<f64>,
    ) -> Result<(Vec<SesScore>, BerReport, Vec<Reception>)> {
        let k = self.cfg.n_users;
        let ber = |s: f64| -> Result<f64> {
            match forced_ber {
                Some(b) => Ok(b),
                None => ber_from_sinr(&BitChannelModel {
                    modulation: Modulation::GrayQpsk,
                    sinr: s,
                }),
            }
        };
        let map_sinr = match self.layout.map {
            MapCarrier::Common => &sinr.common_sinr,
            _ => &sinr.private_sinr,
        };
        let map_ber = map_sinr.iter().map(|&s| ber(s)).collect::<Result<Vec<_>>>()?;
        let text_ber = sinr.private_sinr.iter().map(|&s| ber(s)).collect::<Result<Vec<_>>>()?;

        let map_bits = if self.layout.map != MapCarrier::Absent {
            Some(self.layout.map_codec.encode(&self.map, &self.geom, budget.n_c)?)
        } else {
            None
        };

        let mut scores = Vec::with_capacity(k);
        let mut reception = Vec::with_capacity(k);
        let mut map_counts = Vec::with_capacity(k);
        let mut text_counts = Vec::with_capacity(k);
        for u in 0..k {
            let map = match &map_bits {
                Some(bits) => {
                    let (rx, flips) = semcodec::transmit_bits_with(bits, map_ber[u], &mut self.transport_rng)?;
                    map_counts.push((flips, bits.len()));
                    Some(self.layout.map_codec.decode(&rx, &self.geom)?)
                }
                None => {
                    map_counts.push((0, 0));
                    None
                }
            };
            let text = if self.layout.text {
                let payload = semcodec::text_encode(&self.prompts[u], budget.n_p[u])?;
                let (rx, flips) = semcodec::transmit_bits_with(&payload.bits, text_ber[u], &mut self.transport_rng)?;
                text_counts.push((flips, payload.bits.len()));
                let decoded = semcodec::text_decode(&rx, &payload.word_lengths)?;
                Some(semcodec::spell_correct(&decoded, &self.dictionary))
            } else {
                text_counts.push((0, 0));
                None
            };
            let artifacts = DeliveredArtifacts {
                map_truth: &self.map,
                map_received: map.as_ref(),
                prompt_truth: &self.prompts[u],
                prompt_received: text.as_ref(),
                n_max: self.cfg.n_max,
            };
            scores.push(self.evaluator.evaluate(&artifacts)?);
            reception.push(Reception { map, text });
        }
        Ok((
            scores,
            BerReport {
                map_ber,
                text_ber,
                map_bits: map_counts,
                text_bits: text_counts,
                map_on_common: self.layout.map == MapCarrier::Common,
            },
            reception,
        ))
    }

    /// Scores fixed beamformers and budget on the current channels with an
    /// injected bit error rate on every stream; does not advance the channel.
    pub fn score_with_ber(&mut self, beams: &BeamformerSet, budget: &SemanticBudget, ber: f64) -> Result<Vec<SesScore>> {
        let (beams, budget) = self.restrict(beams.clone(), budget.clone());
        let sinr = precode::sinr_report(&self.channels, &beams, self.sigma2)?;
        let (scores, _, reception) = self.transport_and_score(&sinr, &budget, Some(ber))?;
        self.last_reception = reception;
        Ok(scores)
    }

    /// Advances to a fresh channel draw without acting.
    pub fn advance(&mut self) -> Result<StateVector> {
        self.redraw()?;
        self.state()
    }
}

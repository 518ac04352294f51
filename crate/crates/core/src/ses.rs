//! Semantic efficiency score: `SES = CLIP + (1 − LPIPS)`.
//!
//! [`clip_score`] and [`lpips_score`] are the exact score formulas over
//! caller-supplied embeddings and feature maps. Producing those vectors needs
//! pretrained vision networks, so the simulator scores outcomes with
//! [`SurrogateEvaluator`] instead: a closed form in the fraction of common
//! and private semantics that arrived intact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semcodec::{MapCodec, PartialMap, SemanticBudget, SemanticMap, TextUnit};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

/// `(cos(a, b) + 1) / 2`.
pub fn clip_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::dim("embedding length", a.0.len(), b.0.len()));
    }
    let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("clip score needs non-zero embeddings"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((cos + 1.0) / 2.0)
}

/// One layer of paired feature maps, stored `[h][w][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub reference: Vec<f64>,
    pub generated: Vec<f64>,
    /// Per-channel weights `η_l`.
    pub weights: Vec<f64>,
}

impl FeatureLayer {
    fn validate(&self) -> Result<()> {
        let n = self.height * self.width * self.channels;
        if n == 0 {
            return Err(Error::domain("feature layer has no elements"));
        }
        if self.reference.len() != n {
            return Err(Error::dim("reference feature map", n, self.reference.len()));
        }
        if self.generated.len() != n {
            return Err(Error::dim("generated feature map", n, self.generated.len()));
        }
        if self.weights.len() != self.channels {
            return Err(Error::dim("channel weights", self.channels, self.weights.len()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::domain("channel weights must be non-negative"));
        }
        Ok(())
    }
}

pub type FeatureStack = Vec<FeatureLayer>;

/// `Σ_l 1/(H_l W_l) Σ_{h,w} ‖η_l ⊙ (y − ŷ)‖²`.
pub fn lpips_score(stack: &[FeatureLayer]) -> Result<f64> {
    let mut total = 0.0;
    for layer in stack {
        layer.validate()?;
        let mut acc = 0.0;
        for (y, yh) in layer
            .reference
            .chunks_exact(layer.channels)
            .zip(layer.generated.chunks_exact(layer.channels))
        {
            for ((a, b), w) in y.iter().zip(yh).zip(&layer.weights) {
                let d = w * (a - b);
                acc += d * d;
            }
        }
        total += acc / (layer.height * layer.width) as f64;
    }
    Ok(total)
}

/// Per-user score. `total = clip_part + 1 − lpips_part`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SesScore {
    pub clip_part: f64,
    pub lpips_part: f64,
    pub total: f64,
}

impl SesScore {
    pub fn new(clip_part: f64, lpips_part: f64) -> Result<Self> {
        if !(clip_part.is_finite() && lpips_part.is_finite()) {
            return Err(Error::domain("SES parts must be finite"));
        }
        Ok(SesScore {
            clip_part,
            lpips_part,
            total: clip_part + (1.0 - lpips_part),
        })
    }
}

/// Shape of the surrogate score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateParams {
    pub w_img: f64,
    pub w_txt: f64,
    pub clip_floor: f64,
    pub lpips_max: f64,
    pub lpips_min: f64,
    pub decay_b: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            w_img: 0.6,
            w_txt: 0.4,
            clip_floor: 0.5,
            lpips_max: 0.8,
            lpips_min: 0.1,
            decay_b: 3.0,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        if !(p.w_img >= 0.0 && p.w_txt >= 0.0 && (p.w_img + p.w_txt - 1.0).abs() < 1e-9) {
            return Err(Error::config("w_img and w_txt must be non-negative and sum to 1"));
        }
        if !(0.0..=1.0).contains(&p.clip_floor) {
            return Err(Error::config("clip_floor must lie in [0, 1]"));
        }
        if !(0.0 <= p.lpips_min && p.lpips_min < p.lpips_max && p.lpips_max <= 1.0) {
            return Err(Error::config("need 0 <= lpips_min < lpips_max <= 1"));
        }
        if !(p.decay_b > 0.0 && p.decay_b.is_finite()) {
            return Err(Error::config("decay_b must be positive"));
        }
        Ok(())
    }

    /// Best score reachable with the given delivered fractions at most.
    pub fn upper_bound(&self, rho_c_max: f64, rho_p_max: f64) -> f64 {
        surrogate_ses(rho_c_max, rho_p_max, self).map_or(f64::NAN, |s| s.total)
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Closed-form SES from delivered fractions:
///
/// ```text
/// x     = w_img·ρ_c + w_txt·ρ_p
/// CLIP  = clip_floor + (1 − clip_floor)·x
/// LPIPS = lpips_min + (lpips_max − lpips_min)·exp(−decay_b·x)
/// ```
pub fn surrogate_ses(rho_c: f64, rho_p: f64, p: &SurrogateParams) -> Result<SesScore> {
    check_fraction("rho_c", rho_c)?;
    check_fraction("rho_p", rho_p)?;
    let x = p.w_img * rho_c + p.w_txt * rho_p;
    let clip = p.clip_floor + (1.0 - p.clip_floor) * x;
    let lpips = p.lpips_min + (p.lpips_max - p.lpips_min) * (-p.decay_b * x).exp();
    SesScore::new(clip, lpips)
}

/// Expected delivered fractions for one user.
///
/// `ρ_c = (n_c/M)·P(cell ok | ber_c)`, with the cell success averaged over
/// `class_freq`; `ρ_p = (n_p/N)·(1 − ber_p)^(8·avg_word_len)`.
pub fn delivered_fractions(
    n_c: usize,
    n_p: usize,
    budget: &SemanticBudget,
    ber_c: f64,
    ber_p: f64,
    codec: MapCodec,
    class_freq: &[f64],
    avg_word_len: f64,
) -> Result<(f64, f64)> {
    check_fraction("ber_c", ber_c)?;
    check_fraction("ber_p", ber_p)?;
    if n_c > budget.m_max || n_p > budget.n_max {
        return Err(Error::domain("units exceed the budget ceilings"));
    }
    let rho_c = if n_c == 0 {
        0.0
    } else {
        n_c as f64 / budget.m_max as f64 * codec.mean_cell_success(ber_c, class_freq)
    };
    let rho_p = if n_p == 0 {
        0.0
    } else {
        n_p as f64 / budget.n_max as f64 * (1.0 - ber_p).powf(8.0 * avg_word_len)
    };
    Ok((rho_c, rho_p))
}

/// Everything a receiver reconstructed, next to its ground truth.
#[derive(Debug, Clone)]
pub struct DeliveredArtifacts<'a> {
    pub map_truth: &'a SemanticMap,
    /// `None` when the scheme carries no map.
    pub map_received: Option<&'a PartialMap>,
    pub prompt_truth: &'a TextUnit,
    /// `None` when the scheme carries no text.
    pub prompt_received: Option<&'a TextUnit>,
    pub n_max: usize,
}

impl DeliveredArtifacts<'_> {
    /// Correct cells over all cells of the map; correct words over `N`.
    pub fn fractions(&self) -> (f64, f64) {
        let rho_c = self.map_received.map_or(0.0, |m| {
            m.correct_cells(self.map_truth) as f64 / self.map_truth.cells.len() as f64
        });
        let rho_p = self.prompt_received.map_or(0.0, |got| {
            let correct = got
                .words()
                .zip(self.prompt_truth.words())
                .filter(|(a, b)| a == b)
                .count();
            (correct as f64 / self.n_max as f64).min(1.0)
        });
        (rho_c, rho_p)
    }
}

/// Scores one user's reconstruction.
pub trait SesEvaluator {
    fn evaluate(&self, artifacts: &DeliveredArtifacts<'_>) -> Result<SesScore>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurrogateEvaluator {
    pub params: SurrogateParams,
}

impl SesEvaluator for SurrogateEvaluator {
    fn evaluate(&self, artifacts: &DeliveredArtifacts<'_>) -> Result<SesScore> {
        let (rho_c, rho_p) = artifacts.fractions();
        surrogate_ses(rho_c, rho_p, &self.params)
    }
}

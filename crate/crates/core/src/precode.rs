//! Common/private superposition precoding and the resulting per-user SINRs.
//!
//! Symbols have unit power, so all transmit power lives in the beamformers.
//! Private-stream SINRs assume the common stream has been decoded and removed
//! perfectly at every receiver.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::error::{Error, Result};

/// `h^H w`.
pub fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(h, w)| h.conj() * w).sum()
}

fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum()
}

/// Common precoder `w_c` and one private precoder per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformerSet {
    pub common: Vec<Complex64>,
    pub private: Vec<Vec<Complex64>>,
}

impl BeamformerSet {
    pub fn zeros(n_users: usize, n_t: usize) -> Self {
        BeamformerSet {
            common: vec![Complex64::default(); n_t],
            private: vec![vec![Complex64::default(); n_t]; n_users],
        }
    }

    pub fn n_antennas(&self) -> usize {
        self.common.len()
    }

    pub fn n_users(&self) -> usize {
        self.private.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_t = self.common.len();
        for w in &self.private {
            if w.len() != n_t {
                return Err(Error::dim("private beamformer length", n_t, w.len()));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        BeamformerSet {
            common: self.common.iter().map(|x| x * c).collect(),
            private: self
                .private
                .iter()
                .map(|w| w.iter().map(|x| x * c).collect())
                .collect(),
        }
    }
}

/// `‖w_c‖² + Σ_k ‖w_k‖²`, in watts.
pub fn total_power(b: &BeamformerSet) -> f64 {
    norm_sqr(&b.common) + b.private.iter().map(|w| norm_sqr(w)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrReport {
    pub common_sinr: Vec<f64>,
    pub private_sinr: Vec<f64>,
}

fn check_dims(h: &ChannelSet, b: &BeamformerSet, sigma2: f64) -> Result<()> {
    b.validate()?;
    if h.n_users() != b.n_users() {
        return Err(Error::dim("number of users", h.n_users(), b.n_users()));
    }
    for hk in &h.per_user {
        if hk.len() != b.n_antennas() {
            return Err(Error::dim("channel length", b.n_antennas(), hk.len()));
        }
    }
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::domain(format!("noise power must be >= 0, got {sigma2}")));
    }
    Ok(())
}

/// Received power of every private stream at user `k`: `|h_k^H w_j|²` for all `j`.
fn private_gains(hk: &[Complex64], b: &BeamformerSet) -> Vec<f64> {
    b.private.iter().map(|w| inner(hk, w).norm_sqr()).collect()
}

/// `γ_c,k = |h_k^H w_c|² / (Σ_j |h_k^H w_j|² + σ²)`, with every private
/// stream (user k's own included) counted as interference.
pub fn common_sinr(h: &ChannelSet, b: &BeamformerSet, sigma2: f64) -> Result<Vec<f64>> {
    check_dims(h, b, sigma2)?;
    Ok(h.per_user
        .iter()
        .map(|hk| {
            let signal = inner(hk, &b.common).norm_sqr();
            let interference: f64 = private_gains(hk, b).iter().sum();
            ratio(signal, interference + sigma2)
        })
        .collect())
}

/// `γ_p,k = |h_k^H w_k|² / (Σ_{j≠k} |h_k^H w_j|² + σ²)`.
pub fn private_sinr(h: &ChannelSet, b: &BeamformerSet, sigma2: f64) -> Result<Vec<f64>> {
    check_dims(h, b, sigma2)?;
    Ok(h.per_user
        .iter()
        .enumerate()
        .map(|(k, hk)| {
            let gains = private_gains(hk, b);
            let interference: f64 = gains
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, g)| g)
                .sum();
            ratio(gains[k], interference + sigma2)
        })
        .collect())
}

pub fn sinr_report(h: &ChannelSet, b: &BeamformerSet, sigma2: f64) -> Result<SinrReport> {
    Ok(SinrReport {
        common_sinr: common_sinr(h, b, sigma2)?,
        private_sinr: private_sinr(h, b, sigma2)?,
    })
}

// 0/0 only happens with a silent stream and zero noise; report no signal.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `x = Σ_k w_k s_p,k + w_c s_c`.
pub fn superpose(b: &BeamformerSet, s_common: Complex64, s_private: &[Complex64]) -> Vec<Complex64> {
    let mut x: Vec<Complex64> = b.common.iter().map(|w| w * s_common).collect();
    for (w, s) in b.private.iter().zip(s_private) {
        for (xi, wi) in x.iter_mut().zip(w) {
            *xi += wi * s;
        }
    }
    x
}

/// Noise-free received signal at user `k`, split into its additive parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceivedTerms {
    /// `h_k^H w_k s_p,k`
    pub desired: Complex64,
    /// `Σ_{j≠k} h_k^H w_j s_p,j` (multi-user interference)
    pub interference: Complex64,
    /// `h_k^H w_c s_c`
    pub common: Complex64,
}

impl ReceivedTerms {
    pub fn sum(&self) -> Complex64 {
        self.desired + self.interference + self.common
    }
}

pub fn received_signal_terms(
    h_k: &[Complex64],
    k: usize,
    b: &BeamformerSet,
    s_common: Complex64,
    s_private: &[Complex64],
) -> Result<ReceivedTerms> {
    b.validate()?;
    if h_k.len() != b.n_antennas() {
        return Err(Error::dim("channel length", b.n_antennas(), h_k.len()));
    }
    if s_private.len() != b.n_users() {
        return Err(Error::dim("private symbols", b.n_users(), s_private.len()));
    }
    if k >= b.n_users() {
        return Err(Error::domain(format!("user index {k} out of range")));
    }
    let mut interference = Complex64::default();
    for (j, (w, s)) in b.private.iter().zip(s_private).enumerate() {
        if j != k {
            interference += inner(h_k, w) * s;
        }
    }
    Ok(ReceivedTerms {
        desired: inner(h_k, &b.private[k]) * s_private[k],
        interference,
        common: inner(h_k, &b.common) * s_common,
    })
}

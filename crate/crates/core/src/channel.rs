//! Base-station to vehicle channel: Rayleigh small-scale fading scaled by a
//! distance-based path loss, and the thermal noise floor.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Large-scale propagation and noise parameters.
///
/// Construct through [`PathLossParams::new`] (or deserialize); the noise power
/// over the full band is derived once at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathLossSpec", into = "PathLossSpec")]
pub struct PathLossParams {
    epsilon0: f64,
    d0: f64,
    alpha: f64,
    bandwidth: f64,
    noise_psd_dbm_hz: f64,
    noise_power_w: f64,
}

/// Serialized form of [`PathLossParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossSpec {
    /// Power gain at the reference distance, in dB (−30 dB ⇒ 1e−3).
    pub epsilon0_db: f64,
    pub d0_m: f64,
    pub alpha: f64,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
}

impl TryFrom<PathLossSpec> for PathLossParams {
    type Error = Error;

    fn try_from(s: PathLossSpec) -> Result<Self> {
        PathLossParams::new(
            db_to_linear(s.epsilon0_db),
            s.d0_m,
            s.alpha,
            s.bandwidth_hz,
            s.noise_psd_dbm_hz,
        )
    }
}

impl From<PathLossParams> for PathLossSpec {
    fn from(p: PathLossParams) -> Self {
        PathLossSpec {
            epsilon0_db: 10.0 * p.epsilon0.log10(),
            d0_m: p.d0,
            alpha: p.alpha,
            bandwidth_hz: p.bandwidth,
            noise_psd_dbm_hz: p.noise_psd_dbm_hz,
        }
    }
}

impl Default for PathLossParams {
    /// −30 dB at 1 m, exponent 3.4, 10 MHz, −174 dBm/Hz.
    fn default() -> Self {
        PathLossParams::new(1e-3, 1.0, 3.4, 10e6, -174.0).expect("default parameters are valid")
    }
}

impl PathLossParams {
    pub fn new(
        epsilon0: f64,
        d0: f64,
        alpha: f64,
        bandwidth: f64,
        noise_psd_dbm_hz: f64,
    ) -> Result<Self> {
        let positive = [
            ("epsilon0", epsilon0),
            ("d0", d0),
            ("alpha", alpha),
            ("bandwidth", bandwidth),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !noise_psd_dbm_hz.is_finite() {
            return Err(Error::config(format!(
                "noise_psd_dbm_hz must be finite, got {noise_psd_dbm_hz}"
            )));
        }
        let noise_power_w = dbm_to_watts(noise_psd_dbm_hz + 10.0 * bandwidth.log10());
        Ok(PathLossParams {
            epsilon0,
            d0,
            alpha,
            bandwidth,
            noise_psd_dbm_hz,
            noise_power_w,
        })
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn noise_psd_dbm_hz(&self) -> f64 {
        self.noise_psd_dbm_hz
    }
}

/// `epsilon0 · (d/d0)^(−alpha)`.
pub fn path_loss_gain(d: f64, p: &PathLossParams) -> Result<f64> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::domain(format!("distance must be > 0, got {d}")));
    }
    Ok(p.epsilon0 * (d / p.d0).powf(-p.alpha))
}

/// Noise power σ² over the whole band, in watts.
pub fn noise_power(p: &PathLossParams) -> f64 {
    p.noise_power_w
}

/// One realization of the per-user channel vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub per_user: Vec<Vec<Complex64>>,
    pub distances: Vec<f64>,
    pub seed: u64,
}

impl ChannelSet {
    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.per_user.first().map_or(0, Vec::len)
    }

    pub fn user(&self, k: usize) -> &[Complex64] {
        &self.per_user[k]
    }
}

/// Draws `h_k = sqrt(path_loss(d_k)) · g_k` with `g_k ~ CN(0, I)`.
///
/// A pure function of its arguments: the fading comes from the
/// [`rng::streams::CHANNEL`] stream of `seed`.
pub fn draw_channels(
    distances: &[f64],
    n_t: usize,
    p: &PathLossParams,
    seed: u64,
) -> Result<ChannelSet> {
    if distances.is_empty() {
        return Err(Error::domain("at least one user distance is required"));
    }
    if n_t == 0 {
        return Err(Error::domain("n_t must be at least 1"));
    }
    let gains = distances
        .iter()
        .map(|&d| path_loss_gain(d, p))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng::stream(seed, rng::streams::CHANNEL);
    let per_user = gains
        .iter()
        .map(|g| {
            let amp = g.sqrt();
            (0..n_t)
                .map(|_| amp * sample_cn(&mut rng))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(ChannelSet {
        per_user,
        distances: distances.to_vec(),
        seed,
    })
}

/// Unit-variance circularly-symmetric complex Gaussian sample.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_distance_gives_epsilon0() {
        let p = PathLossParams::default();
        assert_relative_eq!(path_loss_gain(p.d0(), &p).unwrap(), p.epsilon0());
    }

    #[test]
    fn doubled_distance() {
        let p = PathLossParams::new(1e-3, 1.0, 3.4, 1e7, -174.0).unwrap();
        // 1e-3 * 2^-3.4
        assert_relative_eq!(
            path_loss_gain(2.0, &p).unwrap(),
            9.473_228_540_689_997e-5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn minus_thirty_db_is_one_milli() {
        assert_relative_eq!(db_to_linear(-30.0), 1e-3, max_relative = 1e-14);
        let spec = PathLossSpec {
            epsilon0_db: -30.0,
            d0_m: 1.0,
            alpha: 3.4,
            bandwidth_hz: 1e7,
            noise_psd_dbm_hz: -174.0,
        };
        let p = PathLossParams::try_from(spec).unwrap();
        assert_relative_eq!(p.epsilon0(), 1e-3, max_relative = 1e-14);
    }

    #[test]
    fn non_positive_distance_rejected() {
        let p = PathLossParams::default();
        assert!(matches!(path_loss_gain(0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(path_loss_gain(-3.0, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_floor_ten_mhz() {
        let p = PathLossParams::default();
        // -174 + 70 = -104 dBm = 10^-13.4 W
        assert_relative_eq!(noise_power(&p), 10f64.powf(-13.4), max_relative = 1e-12);
        assert_relative_eq!(noise_power(&p), 3.981e-14, max_relative = 1e-3);
    }

    #[test]
    fn noise_floor_one_hz() {
        let p = PathLossParams::new(1e-3, 1.0, 3.4, 1.0, -174.0).unwrap();
        assert_eq!(noise_power(&p), dbm_to_watts(-174.0));
    }

    #[test]
    fn invalid_noise_psd_rejected() {
        assert!(PathLossParams::new(1e-3, 1.0, 3.4, 1e7, f64::NEG_INFINITY)
            .unwrap_err()
            .is_config());
        assert!(PathLossParams::new(0.0, 1.0, 3.4, 1e7, -174.0).is_err());
        assert!(PathLossParams::new(1e-3, 1.0, -1.0, 1e7, -174.0).is_err());
    }

    #[test]
    fn draw_shapes_and_reproducibility() {
        let p = PathLossParams::default();
        let a = draw_channels(&[30.0, 100.0, 400.0], 8, &p, 42).unwrap();
        let b = draw_channels(&[30.0, 100.0, 400.0], 8, &p, 42).unwrap();
        assert_eq!(a.n_users(), 3);
        assert!(a.per_user.iter().all(|h| h.len() == 8));
        assert_eq!(a, b);
        let c = draw_channels(&[30.0, 100.0, 400.0], 8, &p, 43).unwrap();
        assert_ne!(a.per_user, c.per_user);
    }

    #[test]
    fn empty_distances_rejected() {
        let p = PathLossParams::default();
        assert!(draw_channels(&[], 8, &p, 1).is_err());
        assert!(draw_channels(&[10.0], 0, &p, 1).is_err());
        assert!(draw_channels(&[10.0, -1.0], 4, &p, 1).is_err());
    }

    #[test]
    fn fading_statistics() {
        // 1e5 draws per antenna: mean |h|^2 / path loss -> 1, re/im variance -> 1/2.
        let p = PathLossParams::default();
        let n_t = 4;
        let draws = 100_000 / n_t;
        let g = path_loss_gain(50.0, &p).unwrap();
        let mut power = vec![0.0; n_t];
        let mut re2 = vec![0.0; n_t];
        let mut im2 = vec![0.0; n_t];
        let mut re1 = vec![0.0; n_t];
        for seed in 0..draws as u64 {
            let h = draw_channels(&[50.0], n_t, &p, seed).unwrap();
            for (i, v) in h.user(0).iter().enumerate() {
                let u = v / g.sqrt();
                power[i] += u.norm_sqr();
                re2[i] += u.re * u.re;
                im2[i] += u.im * u.im;
                re1[i] += u.re;
            }
        }
        let total: f64 = power.iter().sum::<f64>() / (draws * n_t) as f64;
        assert!((total - 1.0).abs() < 0.02, "mean power {total}");
        let var_re = re2.iter().sum::<f64>() / (draws * n_t) as f64;
        let var_im = im2.iter().sum::<f64>() / (draws * n_t) as f64;
        assert!((var_re - 0.5).abs() < 0.015, "{var_re}");
        assert!((var_im - 0.5).abs() < 0.015, "{var_im}");
    }

    proptest! {
        #[test]
        fn path_loss_strictly_decreasing(a in 0.1f64..2000.0, b in 0.1f64..2000.0, alpha in 0.5f64..6.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let p = PathLossParams::new(1e-3, 1.0, alpha, 1e7, -174.0).unwrap();
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(path_loss_gain(near, &p).unwrap() > path_loss_gain(far, &p).unwrap());
        }
    }
}

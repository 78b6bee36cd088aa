//! Air-to-ground uplink model.
//!
//! Received power is assembled in dB as `P + G - L - r`, where `L` is the
//! free-space path loss and `r` the excess loss averaged over the LoS/NLoS
//! link classes. [`link_gain`] is the single place where dB turns into a
//! linear factor; every rate and power computation downstream is linear.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// dBm/Hz to W/Hz.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// `2^x - 1` without cancellation for small `x`.
pub(crate) fn exp2_m1(x: f64) -> f64 {
    (x * LN_2).exp_m1()
}

/// Physical-layer constants. Power-like fields are stored linear; the
/// config file declares them in dB / dBm and [`RadioParams::from_config_str`]
/// converts on load.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioParams {
    /// Carrier frequency, Hz.
    pub carrier_freq: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_density: f64,
    /// Per-UAV bandwidth, Hz.
    pub bandwidth: f64,
    /// Antenna gain, linear.
    pub antenna_gain: f64,
    pub path_loss_exponent: f64,
    /// Mean excess loss of a LoS link, dB.
    pub mu_los: f64,
    /// Mean excess loss of a NLoS link, dB.
    pub mu_nlos: f64,
    /// Only used by the sampled excess-loss mode, dB.
    pub sigma_los: f64,
    pub sigma_nlos: f64,
    /// LoS sigmoid coefficients. 9.61 / 0.16 are the usual urban values, not
    /// figures from the simulation table.
    pub sigmoid_a: f64,
    /// Per degree of elevation.
    pub sigmoid_b: f64,
    /// UAV altitude, m.
    pub altitude: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        RadioParams {
            carrier_freq: 5e9,
            noise_density: dbm_to_watts(-140.0),
            bandwidth: 1e6,
            antenna_gain: db_to_linear(10.0),
            path_loss_exponent: 2.0,
            mu_los: 3.0,
            mu_nlos: 23.0,
            sigma_los: 0.0,
            sigma_nlos: 0.0,
            sigmoid_a: 9.61,
            sigmoid_b: 0.16,
            altitude: 200.0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "carrier_freq_hz",
    "noise_density_dbm_per_hz",
    "bandwidth_hz",
    "antenna_gain_db",
    "path_loss_exponent",
    "mu_los_db",
    "mu_nlos_db",
    "sigma_los_db",
    "sigma_nlos_db",
    "sigmoid_a",
    "sigmoid_b",
    "altitude_m",
];

impl RadioParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 11] = [
            (self.carrier_freq > 0.0, "carrier_freq must be > 0"),
            (self.noise_density > 0.0, "noise_density must be > 0"),
            (self.bandwidth > 0.0, "bandwidth must be > 0"),
            (self.antenna_gain > 0.0, "antenna_gain must be > 0"),
            (self.path_loss_exponent >= 2.0, "path_loss_exponent must be >= 2"),
            (self.mu_nlos >= self.mu_los, "mu_nlos must be >= mu_los"),
            (self.altitude > 0.0, "altitude must be > 0"),
            (self.sigmoid_a > 0.0, "sigmoid_a must be > 0"),
            (self.sigmoid_b >= 0.0, "sigmoid_b must be >= 0"),
            (self.sigma_los >= 0.0, "sigma_los must be >= 0"),
            (self.sigma_nlos >= 0.0, "sigma_nlos must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::validation(msg));
            }
        }
        let all = [
            self.carrier_freq,
            self.noise_density,
            self.bandwidth,
            self.antenna_gain,
            self.path_loss_exponent,
            self.mu_los,
            self.mu_nlos,
            self.sigma_los,
            self.sigma_nlos,
            self.sigmoid_a,
            self.sigmoid_b,
            self.altitude,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("radio parameters must be finite"));
        }
        Ok(())
    }

    /// Noise power over the whole band, `n0 * W`.
    pub fn noise_power(&self) -> f64 {
        self.noise_density * self.bandwidth
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Self {
        RadioParams {
            bandwidth,
            ..self.clone()
        }
    }

    /// Parses a flat `key = value` file. Blank lines and `#` comments are
    /// ignored; keys not present keep their default.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: "radio config".into(),
                line: idx as u64 + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(parse_err(format!("unknown key {key:?}")));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid number for {key}: {:?}", value.trim())))?;
            if values.insert(key, value).is_some() {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
        }

        let mut p = RadioParams::default();
        for (key, v) in values {
            match key {
                "carrier_freq_hz" => p.carrier_freq = v,
                "noise_density_dbm_per_hz" => p.noise_density = dbm_to_watts(v),
                "bandwidth_hz" => p.bandwidth = v,
                "antenna_gain_db" => p.antenna_gain = db_to_linear(v),
                "path_loss_exponent" => p.path_loss_exponent = v,
                "mu_los_db" => p.mu_los = v,
                "mu_nlos_db" => p.mu_nlos = v,
                "sigma_los_db" => p.sigma_los = v,
                "sigma_nlos_db" => p.sigma_nlos = v,
                "sigmoid_a" => p.sigmoid_a = v,
                "sigmoid_b" => p.sigmoid_b = v,
                "altitude_m" => p.altitude = v,
                _ => unreachable!(),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Inverse of [`RadioParams::from_config_str`].
    pub fn to_config_string(&self) -> String {
        format!(
            "carrier_freq_hz = {}\nnoise_density_dbm_per_hz = {}\nbandwidth_hz = {}\n\
             antenna_gain_db = {}\npath_loss_exponent = {}\nmu_los_db = {}\nmu_nlos_db = {}\n\
             sigma_los_db = {}\nsigma_nlos_db = {}\nsigmoid_a = {}\nsigmoid_b = {}\naltitude_m = {}\n",
            self.carrier_freq,
            linear_to_db(self.noise_density) + 30.0,
            self.bandwidth,
            linear_to_db(self.antenna_gain),
            self.path_loss_exponent,
            self.mu_los,
            self.mu_nlos,
            self.sigma_los,
            self.sigma_nlos,
            self.sigmoid_a,
            self.sigmoid_b,
            self.altitude,
        )
    }
}

/// A position in local planar meters; `z` is height above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub const fn ground(x: f64, y: f64) -> Self {
        Point3 { x, y, z: 0.0 }
    }
}

/// 3-D link length (m) and elevation angle (degrees, in (0, 90]).
pub fn distance_and_elevation(uav: Point3, ground: Point3) -> Result<(f64, f64)> {
    let coords = [uav.x, uav.y, uav.z, ground.x, ground.y, ground.z];
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite coordinate".into()));
    }
    let dz = uav.z - ground.z;
    if ground.z < 0.0 || dz <= 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "UAV height {} must exceed ground height {} >= 0",
            uav.z, ground.z
        )));
    }
    let dx = uav.x - ground.x;
    let dy = uav.y - ground.y;
    let distance = (dx * dx + dy * dy + dz * dz).sqrt();
    let elevation = (dz / distance).clamp(-1.0, 1.0).asin().to_degrees();
    Ok((distance, elevation))
}

/// `10 n log10(4 pi f_c d / c)` in dB.
pub fn free_space_path_loss(params: &RadioParams, distance: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::domain(format!("distance must be > 0, got {distance}")));
    }
    Ok(10.0
        * params.path_loss_exponent
        * (4.0 * PI * params.carrier_freq * distance / SPEED_OF_LIGHT).log10())
}

/// Sigmoid LoS probability `1 / (1 + a exp(-b (theta - a)))`, theta in degrees.
pub fn los_probability(params: &RadioParams, elevation_deg: f64) -> f64 {
    let a = params.sigmoid_a;
    1.0 / (1.0 + a * (-params.sigmoid_b * (elevation_deg - a)).exp())
}

/// Mean excess loss in dB, mixing the two link classes by `p_los`.
pub fn expected_excess_loss(params: &RadioParams, p_los: f64) -> f64 {
    params.mu_los * p_los + params.mu_nlos * (1.0 - p_los)
}

/// Draws the excess loss with Gaussian per-class terms, mixed by `p_los`.
/// With both sigmas at zero this equals [`expected_excess_loss`].
pub fn sample_excess_loss<R: Rng + ?Sized>(params: &RadioParams, p_los: f64, rng: &mut R) -> f64 {
    let draw = |mu: f64, sigma: f64, rng: &mut R| {
        if sigma > 0.0 {
            Normal::new(mu, sigma).expect("validated sigma").sample(rng)
        } else {
            mu
        }
    };
    let los = draw(params.mu_los, params.sigma_los, rng);
    let nlos = draw(params.mu_nlos, params.sigma_nlos, rng);
    los * p_los + nlos * (1.0 - p_los)
}

/// How the excess-loss term of a link is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExcessLoss {
    /// Expectation over the link classes at the link's elevation.
    Expected,
    /// A fixed value in dB, independent of geometry.
    Frozen(f64),
}

/// Linear channel gain `10^((G - L - r) / 10)` of a ground-to-UAV link.
pub fn link_gain(params: &RadioParams, uav: Point3, ground: Point3) -> Result<f64> {
    link_gain_with(params, uav, ground, ExcessLoss::Expected)
}

pub fn link_gain_with(
    params: &RadioParams,
    uav: Point3,
    ground: Point3,
    excess: ExcessLoss,
) -> Result<f64> {
    let (distance, elevation) = distance_and_elevation(uav, ground)?;
    let fspl = free_space_path_loss(params, distance)?;
    let r = match excess {
        ExcessLoss::Expected => expected_excess_loss(params, los_probability(params, elevation)),
        ExcessLoss::Frozen(db) => db,
    };
    Ok(gain_from_db(params, fspl, r))
}

/// Like [`link_gain`] but with the excess loss drawn from `rng`.
pub fn link_gain_sampled<R: Rng + ?Sized>(
    params: &RadioParams,
    uav: Point3,
    ground: Point3,
    rng: &mut R,
) -> Result<f64> {
    let (distance, elevation) = distance_and_elevation(uav, ground)?;
    let fspl = free_space_path_loss(params, distance)?;
    let r = sample_excess_loss(params, los_probability(params, elevation), rng);
    Ok(gain_from_db(params, fspl, r))
}

fn gain_from_db(params: &RadioParams, fspl_db: f64, excess_db: f64) -> f64 {
    db_to_linear(linear_to_db(params.antenna_gain) - fspl_db - excess_db)
}

/// Smallest transmit power (W) that supports `rate` over the full band.
pub fn min_power_for_rate(params: &RadioParams, rate: f64, gain: f64) -> Result<f64> {
    if !(gain > 0.0) {
        return Err(Error::domain(format!("gain must be > 0, got {gain}")));
    }
    if !(rate >= 0.0) {
        return Err(Error::domain(format!("rate must be >= 0, got {rate}")));
    }
    Ok(exp2_m1(rate / params.bandwidth) * params.noise_power() / gain)
}

/// Shannon rate (bit/s) achieved with transmit power `power` at `gain`.
pub fn rate_for_power(params: &RadioParams, power: f64, gain: f64) -> f64 {
    params.bandwidth * (gain * power / params.noise_power()).ln_1p() / LN_2
}

//! Synthetic ground-truth environment.
//!
//! A [`FieldModel`] gives the true value of every configured quantity at any
//! position and time. It is a pure function of its configuration: node
//! noise is drawn by the sampler from per-node streams, never here.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{haversine_distance, GeoPoint, Quantity, Timestamp};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("quantity {0} is not configured in the field model")]
    UnknownQuantity(Quantity),
    #[error("path has no vertices")]
    EmptyPath,
    #[error("speed must be positive, got {0}")]
    InvalidSpeed(String),
}

/// Gaussian bump added to a quantity around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plume {
    pub center: GeoPoint,
    pub sigma_m: f64,
    pub amplitude: f64,
}

impl Plume {
    fn at(&self, p: GeoPoint) -> f64 {
        let d = haversine_distance(self.center, p);
        self.amplitude * (-(d * d) / (2.0 * self.sigma_m * self.sigma_m)).exp()
    }
}

fn default_peak_hour() -> f64 {
    14.0
}

/// Generator parameters for one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantityField {
    pub baseline: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    /// UTC hour at which the diurnal sinusoid peaks.
    #[serde(default = "default_peak_hour")]
    pub diurnal_peak_hour: f64,
    /// Gain applied to [`traffic_intensity`].
    #[serde(default)]
    pub traffic_coupling: f64,
    #[serde(default)]
    pub plumes: Vec<Plume>,
    /// Standard deviation of the white measurement noise added by nodes.
    #[serde(default)]
    pub noise_sigma: f64,
}

impl QuantityField {
    pub fn constant(baseline: f64) -> QuantityField {
        QuantityField {
            baseline,
            diurnal_amplitude: 0.0,
            diurnal_peak_hour: default_peak_hour(),
            traffic_coupling: 0.0,
            plumes: Vec::new(),
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldModel {
    #[serde(default)]
    pub seed: u64,
    pub quantities: BTreeMap<Quantity, QuantityField>,
}

/// Zero-mean daily traffic profile in [-1, 1] with peaks at 08:00 and 20:00 UTC.
pub fn traffic_intensity(t: Timestamp) -> f64 {
    let hour = t.0.rem_euclid(86_400) as f64 / 3600.0;
    (4.0 * PI * (hour - 8.0) / 24.0).cos()
}

impl FieldModel {
    pub fn new(seed: u64) -> FieldModel {
        FieldModel {
            seed,
            quantities: BTreeMap::new(),
        }
    }

    pub fn with(mut self, q: Quantity, cfg: QuantityField) -> FieldModel {
        self.quantities.insert(q, cfg);
        self
    }

    pub fn config(&self, q: Quantity) -> Result<&QuantityField, FieldError> {
        self.quantities.get(&q).ok_or(FieldError::UnknownQuantity(q))
    }

    pub fn noise_sigma(&self, q: Quantity) -> f64 {
        self.quantities.get(&q).map_or(0.0, |c| c.noise_sigma)
    }

    /// True value of `q` at `p` and `t`.
    pub fn value(&self, q: Quantity, p: GeoPoint, t: Timestamp) -> Result<f64, FieldError> {
        let cfg = self.config(q)?;
        let day_phase = t.0.rem_euclid(86_400) as f64 / SECONDS_PER_DAY;
        let peak_phase = cfg.diurnal_peak_hour / 24.0;
        let mut v = cfg.baseline
            + cfg.diurnal_amplitude * (2.0 * PI * (day_phase - peak_phase)).cos()
            + cfg.traffic_coupling * traffic_intensity(t);
        v += cfg.plumes.iter().map(|pl| pl.at(p)).sum::<f64>();
        Ok(clamp_physical(q, v))
    }
}

/// Applies the physical range of `q` (non-negative concentrations, RH ≤ 100).
pub fn clamp_physical(q: Quantity, v: f64) -> f64 {
    let v = if q.is_non_negative() { v.max(0.0) } else { v };
    if q == Quantity::RelativeHumidity {
        v.min(100.0)
    } else {
        v
    }
}

/// See [`FieldModel::value`].
pub fn field_value(f: &FieldModel, q: Quantity, p: GeoPoint, t: Timestamp) -> Result<f64, FieldError> {
    f.value(q, p, t)
}

/// Polyline with precomputed cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    vertices: Vec<GeoPoint>,
    cumulative_m: Vec<f64>,
}

impl Polyline {
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Polyline, FieldError> {
        if vertices.is_empty() {
            return Err(FieldError::EmptyPath);
        }
        let mut cumulative_m = Vec::with_capacity(vertices.len());
        let mut acc = 0.0;
        cumulative_m.push(0.0);
        for pair in vertices.windows(2) {
            acc += haversine_distance(pair[0], pair[1]);
            cumulative_m.push(acc);
        }
        Ok(Polyline { vertices, cumulative_m })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn length_m(&self) -> f64 {
        *self.cumulative_m.last().unwrap_or(&0.0)
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> GeoPoint {
        let last = self.vertices.len() - 1;
        if s <= 0.0 || last == 0 {
            return self.vertices[0];
        }
        if s >= self.length_m() {
            return self.vertices[last];
        }
        // first vertex strictly beyond s
        let i = self.cumulative_m.partition_point(|&c| c <= s);
        let (a, b) = (self.vertices[i - 1], self.vertices[i]);
        let seg = self.cumulative_m[i] - self.cumulative_m[i - 1];
        if seg <= 0.0 {
            return a;
        }
        let f = (s - self.cumulative_m[i - 1]) / seg;
        GeoPoint {
            lat: a.lat + f * (b.lat - a.lat),
            lon: a.lon + f * (b.lon - a.lon),
        }
    }
}

/// Position after `elapsed_s` seconds of travel at `speed` m/s, going
/// back and forth along the path.
pub fn path_position(path: &Polyline, speed: f64, elapsed_s: f64) -> Result<GeoPoint, FieldError> {
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(FieldError::InvalidSpeed(speed.to_string()));
    }
    let len = path.length_m();
    if len <= 0.0 {
        return Ok(path.vertices[0]);
    }
    let s = (speed * elapsed_s.max(0.0)).rem_euclid(2.0 * len);
    let s = if s > len { 2.0 * len - s } else { s };
    Ok(path.point_at(s))
}

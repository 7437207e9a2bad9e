//! Sensor-node behavior: periodic sampling and sensor physics.
//!
//! A reading goes through `field + noise`, the node's bias hook, a
//! first-order T90 lag, limit-of-detection clipping and quantization, in
//! that order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{co_ppm_to_mg_m3, Flag, Flags, GeoPoint, Measurement, NodeDescriptor, NodeKind, Quantity, Timestamp};
use crate::field::{clamp_physical, path_position, FieldError, FieldModel, Polyline};
use crate::rng::stream_rng;

/// Node sampling period T_N, seconds.
pub const SAMPLE_PERIOD_S: i64 = 300;

/// NDIR gas sensor warm-up before the first valid reading, seconds.
pub const GAS_WARMUP_S: f64 = 900.0;

/// Default sensor response time T90, seconds.
pub const DEFAULT_T90_S: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub quantity: Quantity,
    pub warmup_s: f64,
    pub t90_s: f64,
    /// Limit of detection in the quantity's unit; 0 disables clipping.
    pub lod: f64,
    /// Reporting step in the quantity's unit; 0 means continuous.
    pub resolution: f64,
}

impl SensorSpec {
    /// Default characteristics. The NDIR gas channels carry the warm-up,
    /// LoD (CO 5 ppm, CO2 10 ppm, HC 5 ppm) and 1 ppm resolution; CO is
    /// converted to mg/m³.
    pub fn default_for(quantity: Quantity) -> SensorSpec {
        let (warmup_s, lod, resolution) = match quantity {
            Quantity::Co => (GAS_WARMUP_S, co_ppm_to_mg_m3(5.0), co_ppm_to_mg_m3(1.0)),
            Quantity::Co2 => (GAS_WARMUP_S, 10.0, 1.0),
            Quantity::Hc => (GAS_WARMUP_S, 5.0, 1.0),
            _ => (0.0, 0.0, 0.0),
        };
        SensorSpec {
            quantity,
            warmup_s,
            t90_s: DEFAULT_T90_S,
            lod,
            resolution,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.warmup_s >= 0.0 && self.t90_s > 0.0 && self.lod >= 0.0 && self.resolution >= 0.0;
        let finite = [self.warmup_s, self.t90_s, self.lod, self.resolution].iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(format!("invalid sensor spec for {}: {:?}", self.quantity, self))
        }
    }
}

/// Partial override of a [`SensorSpec`], as written in scenario files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorOverride {
    pub warmup_s: Option<f64>,
    pub t90_s: Option<f64>,
    pub lod: Option<f64>,
    pub resolution: Option<f64>,
}

impl SensorOverride {
    pub fn apply(&self, mut spec: SensorSpec) -> SensorSpec {
        if let Some(v) = self.warmup_s {
            spec.warmup_s = v;
        }
        if let Some(v) = self.t90_s {
            spec.t90_s = v;
        }
        if let Some(v) = self.lod {
            spec.lod = v;
        }
        if let Some(v) = self.resolution {
            spec.resolution = v;
        }
        spec
    }
}

/// Per-node systematic error: `value * multiplicative + additive`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bias {
    #[serde(default)]
    pub additive: BTreeMap<Quantity, f64>,
    #[serde(default)]
    pub multiplicative: BTreeMap<Quantity, f64>,
}

impl Bias {
    pub fn apply(&self, q: Quantity, v: f64) -> f64 {
        let gain = self.multiplicative.get(&q).copied().unwrap_or(1.0);
        let offset = self.additive.get(&q).copied().unwrap_or(0.0);
        v * gain + offset
    }

    pub fn is_zero(&self) -> bool {
        self.additive.values().all(|v| *v == 0.0) && self.multiplicative.values().all(|v| *v == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path: Polyline,
    pub speed: f64,
    /// Time at which the node is at the path's first vertex.
    pub start: Timestamp,
    /// Extra travel time added to every query, to phase-shift nodes sharing a path.
    pub offset_s: f64,
}

impl Trajectory {
    pub fn position(&self, t: Timestamp) -> Result<GeoPoint, FieldError> {
        let elapsed = (t.0 - self.start.0) as f64 + self.offset_s;
        path_position(&self.path, self.speed, elapsed)
    }
}

/// First-order sensor response. The rate ln(10)/t90 makes a step reach
/// 90% of its height after exactly `t90`.
pub fn lag_filter(prev: f64, target: f64, dt: f64, t90: f64) -> f64 {
    let k = std::f64::consts::LN_10 / t90;
    target + (prev - target) * (-k * dt).exp()
}

/// Nearest multiple of `resolution`, ties away from zero. A zero
/// resolution leaves `v` unchanged.
pub fn quantize(v: f64, resolution: f64) -> f64 {
    if resolution <= 0.0 {
        v
    } else {
        (v / resolution).round() * resolution
    }
}

/// Mutable state of one simulated node.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub descriptor: NodeDescriptor,
    pub powered_since: Timestamp,
    pub sensors: BTreeMap<Quantity, SensorSpec>,
    pub bias: Bias,
    pub trajectory: Option<Trajectory>,
    last_filtered: BTreeMap<Quantity, (Timestamp, f64)>,
    noise: BTreeMap<Quantity, ChaCha8Rng>,
}

impl NodeState {
    /// `noise_root` seeds one independent noise stream per quantity.
    pub fn new(
        descriptor: NodeDescriptor,
        powered_since: Timestamp,
        sensors: BTreeMap<Quantity, SensorSpec>,
        bias: Bias,
        trajectory: Option<Trajectory>,
        noise_root: u64,
    ) -> Result<NodeState, String> {
        descriptor.validate().map_err(|e| e.to_string())?;
        match (descriptor.kind, &trajectory) {
            (NodeKind::Mobile, None) => return Err(format!("mobile node {} has no trajectory", descriptor.node_id)),
            (NodeKind::Mobile, Some(_)) => {}
            (_, Some(_)) => return Err(format!("static node {} cannot have a trajectory", descriptor.node_id)),
            (_, None) => {}
        }
        let mut specs = BTreeMap::new();
        for &q in &descriptor.sensor_suite {
            let spec = sensors.get(&q).copied().unwrap_or_else(|| SensorSpec::default_for(q));
            spec.validate()?;
            specs.insert(q, spec);
        }
        let noise = descriptor
            .sensor_suite
            .iter()
            .map(|&q| (q, stream_rng(noise_root, &[descriptor.node_id.as_str(), q.code()])))
            .collect();
        Ok(NodeState {
            descriptor,
            powered_since,
            sensors: specs,
            bias,
            trajectory,
            last_filtered: BTreeMap::new(),
            noise,
        })
    }

    pub fn position(&self, t: Timestamp) -> Result<GeoPoint, FieldError> {
        match &self.trajectory {
            Some(traj) => traj.position(t),
            // validated at construction
            None => Ok(self.descriptor.home_position.expect("static node has a home position")),
        }
    }

    /// Sets the lag-filter state of `q` as if the sensor had settled at `value`.
    pub fn prime_filter(&mut self, q: Quantity, value: f64, t: Timestamp) {
        self.last_filtered.insert(q, (t, value));
    }

    /// One reading per quantity in the suite, in quantity order. `t` is
    /// expected on the node's sampling grid.
    pub fn sample(&mut self, field: &FieldModel, t: Timestamp) -> Result<Vec<Measurement>, FieldError> {
        let position = self.position(t)?.canonical();
        let mut out = Vec::with_capacity(self.sensors.len());
        for (&q, spec) in &self.sensors {
            let truth = field.value(q, position, t)?;
            let z: f64 = self.noise.get_mut(&q).expect("stream per quantity").sample(StandardNormal);
            let noisy = truth + z * field.noise_sigma(q);
            let target = clamp_physical(q, self.bias.apply(q, noisy));

            let filtered = match self.last_filtered.get(&q) {
                Some(&(prev_t, prev)) if t > prev_t => lag_filter(prev, target, (t.0 - prev_t.0) as f64, spec.t90_s),
                Some(&(_, prev)) => prev,
                None => target,
            };
            self.last_filtered.insert(q, (t, filtered));

            let mut flags = Flags::NONE;
            let mut value = filtered;
            if ((t.0 - self.powered_since.0) as f64) < spec.warmup_s {
                flags.insert(Flag::WarmingUp);
            }
            if spec.lod > 0.0 && value < spec.lod {
                flags.insert(Flag::BelowLoD);
                value = 0.0;
            }
            if spec.resolution > 0.0 {
                value = quantize(value, spec.resolution);
                flags.insert(Flag::Quantized);
            }

            out.push(
                Measurement {
                    node_id: self.descriptor.node_id.clone(),
                    timestamp: t,
                    position,
                    quantity: q,
                    value,
                    flags,
                }
                .canonical(),
            );
        }
        Ok(out)
    }
}

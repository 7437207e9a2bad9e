//! Scenario files: deployment layout, network parameters and the synthetic
//! field, read from TOML.
//!
//! [`ScenarioConfig`] mirrors the file; [`ScenarioConfig::resolve`] checks
//! every cross-reference and produces a [`Scenario`] ready to simulate. See
//! `docs/FORMATS.md` for the full schema.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    haversine_distance, GeoPoint, NodeDescriptor, NodeId, NodeKind, Quantity, Radio, Timestamp, MOBILE_SUITE,
    WEATHER_SUITE,
};
use crate::field::{FieldModel, Polyline};
use crate::nodes::{Bias, NodeState, SensorOverride, SensorSpec, Trajectory};

/// Name of the bundled reference deployment.
pub const PISA_DEFAULT: &str = "pisa-default";
/// Bundled reference deployment with systematic mobile-node bias enabled.
pub const PISA_MOBILE_BIAS: &str = "pisa-mobile-bias";

const PISA_DEFAULT_TOML: &str = include_str!("../scenarios/pisa-default.toml");
const PISA_MOBILE_BIAS_TOML: &str = include_str!("../scenarios/pisa-mobile-bias.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Radio link parameters as written in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Omitted means unlimited range.
    pub range_m: Option<f64>,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub latency_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkModel {
    pub kind: Radio,
    pub range_m: f64,
    pub loss_prob: f64,
    pub latency_s: f64,
}

impl LinkModel {
    fn from_config(kind: Radio, cfg: LinkConfig) -> Result<LinkModel, ConfigError> {
        let link = LinkModel {
            kind,
            range_m: cfg.range_m.unwrap_or(f64::INFINITY),
            loss_prob: cfg.loss_prob,
            latency_s: cfg.latency_s,
        };
        if !(link.range_m > 0.0) {
            return Err(invalid(format!("{kind:?} range must be positive, got {}", link.range_m)));
        }
        if !(0.0..=1.0).contains(&link.loss_prob) {
            return Err(invalid(format!("{kind:?} loss_prob must lie in [0, 1], got {}", link.loss_prob)));
        }
        if !(link.latency_s >= 0.0 && link.latency_s.is_finite()) {
            return Err(invalid(format!("{kind:?} latency must be finite and >= 0, got {}", link.latency_s)));
        }
        Ok(link)
    }
}

fn short_range_fixed() -> LinkConfig {
    LinkConfig {
        range_m: Some(500.0),
        loss_prob: 0.0,
        latency_s: 1.0,
    }
}

fn short_range_mobile() -> LinkConfig {
    LinkConfig {
        range_m: Some(300.0),
        loss_prob: 0.0,
        latency_s: 1.0,
    }
}

fn wide_area() -> LinkConfig {
    LinkConfig {
        range_m: None,
        loss_prob: 0.0,
        latency_s: 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "short_range_fixed")]
    pub short_range_fixed: LinkConfig,
    #[serde(default = "short_range_mobile")]
    pub short_range_mobile: LinkConfig,
    #[serde(default = "wide_area")]
    pub wide_area: LinkConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            short_range_fixed: short_range_fixed(),
            short_range_mobile: short_range_mobile(),
            wide_area: wide_area(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Network {
    pub short_range_fixed: LinkModel,
    pub short_range_mobile: LinkModel,
    pub wide_area: LinkModel,
}

impl Network {
    pub fn link(&self, radio: Radio) -> &LinkModel {
        match radio {
            Radio::ShortRangeFixed => &self.short_range_fixed,
            Radio::ShortRangeMobile => &self.short_range_mobile,
            Radio::WideArea => &self.wide_area,
        }
    }

    /// Sets the same loss probability on every link.
    pub fn set_loss(&mut self, p: f64) {
        self.short_range_fixed.loss_prob = p;
        self.short_range_mobile.loss_prob = p;
        self.wide_area.loss_prob = p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathRole {
    HeavyTraffic,
    Fitness,
    Route,
}

impl PathRole {
    pub fn name(self) -> &'static str {
        match self {
            PathRole::HeavyTraffic => "heavy_traffic",
            PathRole::Fitness => "fitness",
            PathRole::Route => "route",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub role: PathRole,
    /// `[lat, lon]` vertices.
    pub points: Vec<[f64; 2]>,
}

fn default_speed() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub kind: NodeKind,
    /// `[lat, lon]`; required for every kind except mobile.
    pub position: Option<[f64; 2]>,
    /// Monitoring path a static node belongs to.
    pub path: Option<String>,
    /// Adds PM2.5 to the default fixed-node suite.
    #[serde(default)]
    pub pm25: bool,
    /// Replaces the default suite of the node kind.
    pub suite: Option<Vec<Quantity>>,
    pub radios: Option<Vec<Radio>>,
    /// Route followed by a mobile node.
    pub route: Option<String>,
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    #[serde(default)]
    pub offset_s: f64,
    /// Power-on time relative to the scenario start.
    #[serde(default)]
    pub power_on_s: i64,
    #[serde(default)]
    pub bias: Bias,
}

fn default_sample_period() -> i64 {
    crate::nodes::SAMPLE_PERIOD_S
}

fn default_uplink_period() -> i64 {
    900
}

/// Scenario file contents, before cross-reference checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// ISO-8601 UTC start instant.
    pub start: String,
    pub duration_s: i64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sample_period")]
    pub sample_period_s: i64,
    #[serde(default = "default_uplink_period")]
    pub uplink_period_s: i64,
    pub coordinator: String,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub paths: BTreeMap<String, PathConfig>,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub sensors: BTreeMap<Quantity, SensorOverride>,
    pub field: FieldModel,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// One of the bundled scenarios, by name.
    pub fn builtin(name: &str) -> Option<ScenarioConfig> {
        let text = match name {
            PISA_DEFAULT => PISA_DEFAULT_TOML,
            PISA_MOBILE_BIAS => PISA_MOBILE_BIAS_TOML,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("bundled scenario parses"))
    }

    pub fn resolve(&self) -> Result<Scenario, ConfigError> {
        Scenario::from_config(self)
    }
}

/// A static or mobile node with everything needed to simulate it.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSetup {
    pub descriptor: NodeDescriptor,
    pub path_tag: Option<PathRole>,
    pub trajectory: Option<Trajectory>,
    pub powered_since: Timestamp,
    pub bias: Bias,
}

/// A fully checked scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub start: Timestamp,
    pub duration_s: i64,
    pub seed: u64,
    pub sample_period_s: i64,
    pub uplink_period_s: i64,
    pub coordinator: NodeId,
    pub network: Network,
    pub nodes: Vec<NodeSetup>,
    pub sensors: BTreeMap<Quantity, SensorSpec>,
    pub field: FieldModel,
}

fn point(id: &str, [lat, lon]: [f64; 2]) -> Result<GeoPoint, ConfigError> {
    GeoPoint::new(lat, lon).map_err(|e| invalid(format!("{id}: {e}")))
}

fn default_suite(cfg: &NodeConfig) -> BTreeSet<Quantity> {
    match cfg.kind {
        NodeKind::Fixed => crate::domain::FIXED_SUITE
            .into_iter()
            .filter(|&q| q != Quantity::Pm25 || cfg.pm25)
            .collect(),
        NodeKind::Mobile => MOBILE_SUITE.into_iter().collect(),
        NodeKind::WeatherStation => WEATHER_SUITE.into_iter().collect(),
        NodeKind::Coordinator => BTreeSet::new(),
    }
}

impl Scenario {
    fn from_config(cfg: &ScenarioConfig) -> Result<Scenario, ConfigError> {
        let start = Timestamp::parse_iso8601(&cfg.start).map_err(|e| invalid(format!("start: {e}")))?;
        if cfg.duration_s < 0 {
            return Err(invalid(format!("duration_s must be >= 0, got {}", cfg.duration_s)));
        }
        if cfg.sample_period_s <= 0 || cfg.uplink_period_s <= 0 {
            return Err(invalid("sample and uplink periods must be positive"));
        }
        let network = Network {
            short_range_fixed: LinkModel::from_config(Radio::ShortRangeFixed, cfg.network.short_range_fixed)?,
            short_range_mobile: LinkModel::from_config(Radio::ShortRangeMobile, cfg.network.short_range_mobile)?,
            wide_area: LinkModel::from_config(Radio::WideArea, cfg.network.wide_area)?,
        };

        let mut paths = BTreeMap::new();
        for (name, p) in &cfg.paths {
            let vertices = p
                .points
                .iter()
                .map(|&xy| point(name, xy))
                .collect::<Result<Vec<_>, _>>()?;
            let line = Polyline::new(vertices).map_err(|e| invalid(format!("path {name}: {e}")))?;
            paths.insert(name.as_str(), (p.role, line));
        }

        let mut sensors = BTreeMap::new();
        for q in Quantity::ALL {
            let spec = cfg.sensors.get(&q).map_or(SensorSpec::default_for(q), |o| o.apply(SensorSpec::default_for(q)));
            spec.validate().map_err(invalid)?;
            sensors.insert(q, spec);
        }

        let mut seen = BTreeSet::new();
        let mut nodes = Vec::with_capacity(cfg.nodes.len());
        for n in &cfg.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
            let sensor_suite = match &n.suite {
                Some(s) => s.iter().copied().collect(),
                None => default_suite(n),
            };
            let radios = match &n.radios {
                Some(r) => r.iter().copied().collect(),
                None => n.kind.required_radios().iter().copied().collect(),
            };
            let home_position = n.position.map(|xy| point(&n.id, xy)).transpose()?;
            if n.kind == NodeKind::Mobile && home_position.is_some() {
                return Err(invalid(format!("mobile node {} takes a route, not a position", n.id)));
            }
            let descriptor = NodeDescriptor {
                node_id: NodeId::new(n.id.clone()),
                kind: n.kind,
                sensor_suite,
                radios,
                home_position,
            };
            descriptor.validate().map_err(|e| invalid(format!("node {}: {e}", n.id)))?;
            for q in &descriptor.sensor_suite {
                if !cfg.field.quantities.contains_key(q) {
                    return Err(invalid(format!("node {} measures {q}, which the field does not define", n.id)));
                }
            }

            let path_tag = match &n.path {
                None => None,
                Some(name) => {
                    let (role, _) = paths
                        .get(name.as_str())
                        .ok_or_else(|| invalid(format!("node {} references unknown path {name:?}", n.id)))?;
                    Some(*role)
                }
            };
            let trajectory = match (n.kind, &n.route) {
                (NodeKind::Mobile, Some(name)) => {
                    let (_, line) = paths
                        .get(name.as_str())
                        .ok_or_else(|| invalid(format!("node {} references unknown route {name:?}", n.id)))?;
                    if !(n.speed_mps > 0.0 && n.speed_mps.is_finite()) {
                        return Err(invalid(format!("node {}: speed must be positive", n.id)));
                    }
                    Some(Trajectory {
                        path: line.clone(),
                        speed: n.speed_mps,
                        start,
                        offset_s: n.offset_s,
                    })
                }
                (NodeKind::Mobile, None) => return Err(invalid(format!("mobile node {} has no route", n.id))),
                (_, Some(_)) => return Err(invalid(format!("only mobile nodes follow a route ({})", n.id))),
                (_, None) => None,
            };
            nodes.push(NodeSetup {
                descriptor,
                path_tag,
                trajectory,
                powered_since: start.offset(n.power_on_s),
                bias: n.bias.clone(),
            });
        }

        let coordinator = NodeId::new(cfg.coordinator.clone());
        match nodes.iter().find(|n| n.descriptor.node_id == coordinator) {
            Some(n) if n.descriptor.kind == NodeKind::Coordinator => {}
            Some(_) => return Err(invalid(format!("node {coordinator} is not of kind coordinator"))),
            None => return Err(invalid(format!("coordinator {coordinator} is not a declared node"))),
        }
        if nodes.iter().filter(|n| n.descriptor.kind == NodeKind::Coordinator).count() != 1 {
            return Err(invalid("exactly one coordinator node is required"));
        }

        Ok(Scenario {
            name: cfg.name.clone(),
            start,
            duration_s: cfg.duration_s,
            seed: cfg.seed,
            sample_period_s: cfg.sample_period_s,
            uplink_period_s: cfg.uplink_period_s,
            coordinator,
            network,
            nodes,
            sensors,
            field: cfg.field.clone(),
        })
    }

    pub fn end(&self) -> Timestamp {
        self.start.offset(self.duration_s)
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeSetup> {
        self.nodes.iter().find(|n| &n.descriptor.node_id == id)
    }

    pub fn coordinator_position(&self) -> GeoPoint {
        self.node(&self.coordinator)
            .and_then(|n| n.descriptor.home_position)
            .expect("coordinator has a home position")
    }

    /// Sensing nodes that carry at least one NDIR gas channel.
    pub fn gas_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.descriptor.has_ndir_gas()).count()
    }

    /// Fresh simulation state for every node with a non-empty suite.
    pub fn node_states(&self) -> Vec<NodeState> {
        self.nodes
            .iter()
            .filter(|n| !n.descriptor.sensor_suite.is_empty())
            .map(|n| {
                let sensors = n.descriptor.sensor_suite.iter().map(|q| (*q, self.sensors[q])).collect();
                NodeState::new(
                    n.descriptor.clone(),
                    n.powered_since,
                    sensors,
                    n.bias.clone(),
                    n.trajectory.clone(),
                    self.seed,
                )
                .expect("validated node setup")
            })
            .collect()
    }

    /// Static nodes farther from the coordinator than the fixed short-range link reaches.
    pub fn unreachable_static_nodes(&self) -> Vec<NodeId> {
        let c = self.coordinator_position();
        self.nodes
            .iter()
            .filter_map(|n| {
                let p = n.descriptor.home_position?;
                (haversine_distance(p, c) > self.network.short_range_fixed.range_m).then(|| n.descriptor.node_id.clone())
            })
            .collect()
    }

    pub fn registry(&self) -> NodeRegistry {
        NodeRegistry {
            scenario: self.name.clone(),
            coordinator: self.coordinator.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| RegistryEntry {
                    id: n.descriptor.node_id.clone(),
                    kind: n.descriptor.kind,
                    position: n.descriptor.home_position,
                    path: n.path_tag,
                })
                .collect(),
        }
    }
}

/// Node metadata written next to simulated data, so analyses can tell
/// fixed from mobile nodes and find each station's path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistry {
    pub scenario: String,
    pub coordinator: NodeId,
    pub nodes: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathRole>,
}

impl NodeRegistry {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("registry serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<NodeRegistry, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn ids_where(&self, pred: impl Fn(&RegistryEntry) -> bool) -> BTreeSet<NodeId> {
        self.nodes.iter().filter(|e| pred(e)).map(|e| e.id.clone()).collect()
    }
}

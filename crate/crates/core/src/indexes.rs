//! Air quality (O3, PM2.5), thermal comfort and traffic indexes.
//!
//! Color bands are left-closed and right-open everywhere: a value equal to
//! a threshold belongs to the band that starts at it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Measurement, NodeId, ParseError, Quantity, Timestamp};

/// Moving-average window of the ozone sub-index, seconds.
pub const O3_WINDOW_S: i64 = 8 * 3600;
/// Moving-average window of the PM2.5 sub-index, seconds.
pub const PM_WINDOW_S: i64 = 24 * 3600;

/// Base congestion factor of the traffic index.
pub const BASE_CONGESTION: f64 = 1800.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IndexError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate {0}: weighted sum is zero")]
    DegenerateComposition(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IndexKind {
    #[serde(rename = "AQI_O3")]
    AqiO3,
    #[serde(rename = "AQI_PM")]
    AqiPm,
    #[serde(rename = "TCI")]
    Tci,
    #[serde(rename = "TI")]
    Ti,
}

impl IndexKind {
    pub fn code(self) -> &'static str {
        match self {
            IndexKind::AqiO3 => "AQI_O3",
            IndexKind::AqiPm => "AQI_PM",
            IndexKind::Tci => "TCI",
            IndexKind::Ti => "TI",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            IndexKind::AqiO3 | IndexKind::AqiPm => "ug/m3",
            IndexKind::Tci => "degC",
            IndexKind::Ti => "EV/s",
        }
    }
}

impl FromStr for IndexKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [IndexKind::AqiO3, IndexKind::AqiPm, IndexKind::Tci, IndexKind::Ti]
            .into_iter()
            .find(|k| k.code() == s)
            .ok_or_else(|| ParseError::new("kind", format!("unknown index {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Green,
    Yellow,
    Orange,
    Red,
    DarkRed,
    Blue,
    DarkBlue,
    Unknown,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Green => "Green",
            Color::Yellow => "Yellow",
            Color::Orange => "Orange",
            Color::Red => "Red",
            Color::DarkRed => "DarkRed",
            Color::Blue => "Blue",
            Color::DarkBlue => "DarkBlue",
            Color::Unknown => "Unknown",
        }
    }

    /// Position of an AQI band from best (0) to worst.
    pub fn aqi_rank(self) -> Option<u8> {
        match self {
            Color::Green => Some(0),
            Color::Yellow => Some(1),
            Color::Orange => Some(2),
            Color::Red => Some(3),
            _ => None,
        }
    }

    /// Position of a thermal band from coldest (0) to hottest.
    pub fn thermal_rank(self) -> Option<u8> {
        match self {
            Color::DarkBlue => Some(0),
            Color::Blue => Some(1),
            Color::Green => Some(2),
            Color::Orange => Some(3),
            Color::Red => Some(4),
            Color::DarkRed => Some(5),
            _ => None,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Color {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Color::Green,
            Color::Yellow,
            Color::Orange,
            Color::Red,
            Color::DarkRed,
            Color::Blue,
            Color::DarkBlue,
            Color::Unknown,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| ParseError::new("color", format!("unknown color {s:?}")))
    }
}

/// O3 8-hour mean bands, µg/m³.
pub fn o3_color(mean: f64) -> Color {
    match mean {
        v if v.is_nan() => Color::Unknown,
        v if v < 100.0 => Color::Green,
        v if v < 180.0 => Color::Yellow,
        v if v < 240.0 => Color::Orange,
        _ => Color::Red,
    }
}

/// PM2.5 24-hour mean bands, µg/m³.
pub fn pm_color(mean: f64) -> Color {
    match mean {
        v if v.is_nan() => Color::Unknown,
        v if v < 10.0 => Color::Green,
        v if v < 25.0 => Color::Yellow,
        v if v < 60.0 => Color::Orange,
        _ => Color::Red,
    }
}

/// Thermal comfort bands, °C. Values outside [-13, 46) have no band.
pub fn tci_color(t: f64) -> Color {
    match t {
        v if !(-13.0..46.0).contains(&v) => Color::Unknown,
        v if v < 0.0 => Color::DarkBlue,
        v if v < 9.0 => Color::Blue,
        v if v < 26.0 => Color::Green,
        v if v < 32.0 => Color::Orange,
        v if v < 38.0 => Color::Red,
        _ => Color::DarkRed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexValue {
    pub kind: IndexKind,
    pub station_id: String,
    pub window_end: Timestamp,
    /// `None` when the window held no usable data.
    pub value: Option<f64>,
    pub color: Color,
}

impl IndexValue {
    /// `kind,station_id,window_end,value,color`; an empty value field
    /// means no data.
    pub fn to_record(&self) -> String {
        let value = self
            .value
            .map(|v| crate::domain::canonical_value(v).to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.kind.code(),
            self.station_id,
            self.window_end.to_iso8601(),
            value,
            self.color
        )
    }

    pub fn parse_record(line: &str) -> Result<IndexValue, ParseError> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let [kind, station, end, value, color] = fields[..] else {
            return Err(ParseError::new("index record", format!("expected 5 fields in {line:?}")));
        };
        let value = if value.is_empty() {
            None
        } else {
            Some(value.parse::<f64>().map_err(|e| ParseError::new("value", e.to_string()))?)
        };
        Ok(IndexValue {
            kind: kind.parse()?,
            station_id: station.to_string(),
            window_end: Timestamp::parse_iso8601(end)?,
            value,
            color: color.parse()?,
        })
    }
}

/// Arithmetic mean with compensated summation; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    Some((sum + comp) / values.len() as f64)
}

fn banded(kind: IndexKind, station: &str, window_end: Timestamp, values: &[f64], band: fn(f64) -> Color) -> IndexValue {
    let value = mean(values);
    IndexValue {
        kind,
        station_id: station.to_string(),
        window_end,
        value,
        color: value.map_or(Color::Unknown, band),
    }
}

/// Ozone sub-index from the usable O3 values of the trailing 8 hours.
pub fn aqi_o3(station: &str, window_end: Timestamp, values: &[f64]) -> IndexValue {
    banded(IndexKind::AqiO3, station, window_end, values, o3_color)
}

/// PM2.5 sub-index from the usable values of the trailing 24 hours.
pub fn aqi_pm(station: &str, window_end: Timestamp, values: &[f64]) -> IndexValue {
    banded(IndexKind::AqiPm, station, window_end, values, pm_color)
}

/// Maps air temperature, mean radiant temperature (°C), wind speed (m/s)
/// and relative humidity (%) to an equivalent temperature in °C.
pub trait ThermalModel {
    fn name(&self) -> &'static str;
    fn equivalent_temperature(&self, air: f64, radiant: f64, wind: f64, rh: f64) -> f64;
}

/// Returns the air temperature unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl ThermalModel for IdentityModel {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn equivalent_temperature(&self, air: f64, _radiant: f64, _wind: f64, _rh: f64) -> f64 {
        air
    }
}

/// Steadman-style apparent temperature with a linear mean-radiant term:
///
/// `AT = Ta + 0.33 e - 0.70 ws - 4.00 + 0.25 (Tmrt - Ta)`
///
/// where `e` is the water vapour pressure in hPa. This is a coarse stand-in
/// for UTCI, adequate for banding; it is not the UTCI regression.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApparentTemperatureModel;

impl ApparentTemperatureModel {
    pub const RADIANT_WEIGHT: f64 = 0.25;

    pub fn vapour_pressure_hpa(air: f64, rh: f64) -> f64 {
        rh / 100.0 * 6.105 * (17.27 * air / (237.7 + air)).exp()
    }
}

impl ThermalModel for ApparentTemperatureModel {
    fn name(&self) -> &'static str {
        "apparent"
    }

    fn equivalent_temperature(&self, air: f64, radiant: f64, wind: f64, rh: f64) -> f64 {
        let e = Self::vapour_pressure_hpa(air, rh);
        air + 0.33 * e - 0.70 * wind - 4.00 + Self::RADIANT_WEIGHT * (radiant - air)
    }
}

/// Thermal comfort index for one station.
pub fn tci(
    model: &dyn ThermalModel,
    station: &str,
    window_end: Timestamp,
    air: f64,
    radiant: f64,
    wind: f64,
    rh: f64,
) -> Result<IndexValue, IndexError> {
    if ![air, radiant, wind, rh].iter().all(|v| v.is_finite()) {
        return Err(IndexError::InvalidInput("non-finite thermal input".into()));
    }
    if !(0.0..=100.0).contains(&rh) {
        return Err(IndexError::InvalidInput(format!("relative humidity {rh} outside [0, 100]")));
    }
    if wind < 0.0 {
        return Err(IndexError::InvalidInput(format!("negative wind speed {wind}")));
    }
    let t = model.equivalent_temperature(air, radiant, wind, rh);
    Ok(IndexValue {
        kind: IndexKind::Tci,
        station_id: station.to_string(),
        window_end,
        value: Some(t),
        color: tci_color(t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Bicycles,
    Motorcycles,
    Cars,
    Trucks,
    Buses,
    Trams,
}

impl VehicleClass {
    /// Equivalent-vehicle weight.
    pub fn equivalents(self) -> f64 {
        match self {
            VehicleClass::Bicycles => 0.2,
            VehicleClass::Motorcycles => 0.33,
            VehicleClass::Cars => 1.0,
            VehicleClass::Trucks => 1.75,
            VehicleClass::Buses => 2.25,
            VehicleClass::Trams => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Localization {
    Residential,
    Commercial,
    Industrial,
    Business,
}

impl Localization {
    pub fn k3(self) -> f64 {
        match self {
            Localization::Residential => 1.0,
            Localization::Commercial => 0.98,
            Localization::Industrial => 0.93,
            Localization::Business => 0.85,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    TurningRight,
    TurningLeft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeDirection {
    #[default]
    Flat,
    Uphill,
    Downhill,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Steepness {
    /// Absolute grade in percent.
    pub percent: f64,
    pub direction: SlopeDirection,
}

/// Maneuvering weights. Right and left turns are ranges (1 to 1.25 and
/// 1 to 1.75); the defaults take the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeuverWeights {
    pub straight: f64,
    pub turning_right: f64,
    pub turning_left: f64,
}

impl Default for ManeuverWeights {
    fn default() -> Self {
        ManeuverWeights {
            straight: 1.0,
            turning_right: 1.25,
            turning_left: 1.75,
        }
    }
}

impl ManeuverWeights {
    pub fn get(&self, m: Maneuver) -> f64 {
        match m {
            Maneuver::Straight => self.straight,
            Maneuver::TurningRight => self.turning_right,
            Maneuver::TurningLeft => self.turning_left,
        }
    }
}

fn default_base() -> f64 {
    BASE_CONGESTION
}

/// Description of one traffic access (the virtual line where flow is measured).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficAccessConfig {
    #[serde(default)]
    pub access: String,
    #[serde(default = "default_base")]
    pub s_b: f64,
    /// Fraction of the flow per vehicle class, summing to 1.
    pub composition: BTreeMap<VehicleClass, f64>,
    /// Overrides of the equivalent-vehicle weights.
    #[serde(default)]
    pub equivalents: BTreeMap<VehicleClass, f64>,
    #[serde(default)]
    pub steepness: Steepness,
    pub localization: Localization,
    /// Fraction of the flow per maneuver, summing to 1.
    pub maneuvers: BTreeMap<Maneuver, f64>,
    #[serde(default)]
    pub maneuver_weights: ManeuverWeights,
}

/// Traffic index together with its adjustment factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrafficIndex {
    pub s_b: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub value: f64,
}

impl TrafficIndex {
    pub fn to_index_value(&self, access: &str, at: Timestamp) -> IndexValue {
        IndexValue {
            kind: IndexKind::Ti,
            station_id: access.to_string(),
            window_end: at,
            value: Some(self.value),
            // no color bands are defined for TI
            color: Color::Unknown,
        }
    }
}

const SHARE_TOLERANCE: f64 = 1e-9;

fn normalize_shares<K>(shares: &mut BTreeMap<K, f64>) {
    let total: f64 = shares.values().sum();
    if total > 0.0 {
        shares.values_mut().for_each(|v| *v /= total);
    }
}

fn check_shares<K: fmt::Debug>(what: &str, shares: &BTreeMap<K, f64>) -> Result<(), IndexError> {
    if let Some((k, v)) = shares.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(IndexError::InvalidInput(format!("{what} share for {k:?} is {v}")));
    }
    let total: f64 = shares.values().sum();
    if (total - 1.0).abs() > SHARE_TOLERANCE {
        return Err(IndexError::InvalidInput(format!("{what} shares sum to {total}, expected 1")));
    }
    Ok(())
}

impl TrafficAccessConfig {
    pub fn equivalents_of(&self, class: VehicleClass) -> f64 {
        self.equivalents.get(&class).copied().unwrap_or_else(|| class.equivalents())
    }

    pub fn k2(&self) -> f64 {
        let i = self.steepness.percent;
        match self.steepness.direction {
            SlopeDirection::Flat => 1.0,
            SlopeDirection::Uphill => 1.0 - 0.03 * i,
            SlopeDirection::Downhill => 1.0 + 0.03 * i,
        }
    }

    /// Rescales composition and maneuver shares so each sums to 1.
    pub fn normalized(mut self) -> TrafficAccessConfig {
        normalize_shares(&mut self.composition);
        normalize_shares(&mut self.maneuvers);
        self
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.s_b.is_finite() && self.s_b > 0.0) {
            return Err(IndexError::InvalidInput(format!("s_b must be positive, got {}", self.s_b)));
        }
        check_shares("composition", &self.composition)?;
        check_shares("maneuver", &self.maneuvers)?;
        let p = self.steepness.percent;
        if !(p.is_finite() && p >= 0.0) {
            return Err(IndexError::InvalidInput(format!("steepness must be a non-negative percentage, got {p}")));
        }
        if self.k2() <= 0.0 {
            return Err(IndexError::InvalidInput(format!("uphill grade {p}% leaves no capacity")));
        }
        let weights = self.equivalents.values().chain([
            &self.maneuver_weights.straight,
            &self.maneuver_weights.turning_right,
            &self.maneuver_weights.turning_left,
        ]);
        for w in weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(IndexError::InvalidInput(format!("weight {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `TI = s_b K1 K2 K3 K4` in equivalent vehicles per unit time.
pub fn traffic_index(cfg: &TrafficAccessConfig) -> Result<TrafficIndex, IndexError> {
    cfg.validate()?;
    let weighted_vehicles: f64 = cfg.composition.iter().map(|(&c, &a)| a * cfg.equivalents_of(c)).sum();
    if weighted_vehicles == 0.0 {
        return Err(IndexError::DegenerateComposition("vehicle composition"));
    }
    let weighted_maneuvers: f64 = cfg.maneuvers.iter().map(|(&m, &b)| b * cfg.maneuver_weights.get(m)).sum();
    if weighted_maneuvers == 0.0 {
        return Err(IndexError::DegenerateComposition("maneuver mix"));
    }
    let k1 = 1.0 / weighted_vehicles;
    let k2 = cfg.k2();
    let k3 = cfg.localization.k3();
    let k4 = 1.0 / weighted_maneuvers;
    Ok(TrafficIndex {
        s_b: cfg.s_b,
        k1,
        k2,
        k3,
        k4,
        value: cfg.s_b * k1 * k2 * k3 * k4,
    })
}

#[derive(Debug, Default, Clone)]
struct StationWindow {
    o3: Vec<(Timestamp, f64)>,
    pm: Vec<(Timestamp, f64)>,
    latest: BTreeMap<Quantity, (Timestamp, f64)>,
    seen: BTreeSet<Quantity>,
}

const THERMAL_INPUTS: [Quantity; 4] = [
    Quantity::Temperature,
    Quantity::RadiantTemperature,
    Quantity::WindSpeed,
    Quantity::RelativeHumidity,
];

/// Per-station sliding windows updated as the server ingests data.
pub struct IndexEngine {
    model: Box<dyn ThermalModel + Send + Sync>,
    stations: BTreeMap<NodeId, StationWindow>,
}

impl IndexEngine {
    pub fn new(model: Box<dyn ThermalModel + Send + Sync>) -> IndexEngine {
        IndexEngine {
            model,
            stations: BTreeMap::new(),
        }
    }

    pub fn model_name(&self) -> &'static str {
        self.model.name()
    }

    /// Adds a measurement; flagged readings are ignored.
    pub fn ingest(&mut self, m: &Measurement) {
        if !m.is_usable() {
            return;
        }
        let w = self.stations.entry(m.node_id.clone()).or_default();
        w.seen.insert(m.quantity);
        let sample = (m.timestamp, m.value);
        match m.quantity {
            Quantity::O3 => w.o3.push(sample),
            Quantity::Pm25 => w.pm.push(sample),
            q if THERMAL_INPUTS.contains(&q) => {
                let newer = w.latest.get(&q).is_none_or(|(ts, _)| *ts <= m.timestamp);
                if newer {
                    w.latest.insert(q, sample);
                }
            }
            _ => {}
        }
    }

    /// Recomputes every index whose inputs a station has ever reported,
    /// over windows ending (exclusive) at `t`.
    pub fn update(&mut self, t: Timestamp) -> Vec<IndexValue> {
        let mut out = Vec::new();
        for (id, w) in &mut self.stations {
            // nothing older than the longest window is needed again
            w.o3.retain(|(ts, _)| ts.0 >= t.0 - PM_WINDOW_S);
            w.pm.retain(|(ts, _)| ts.0 >= t.0 - PM_WINDOW_S);
            let in_window = |samples: &[(Timestamp, f64)], width: i64| -> Vec<f64> {
                samples
                    .iter()
                    .filter(|(ts, _)| ts.0 >= t.0 - width && ts.0 < t.0)
                    .map(|(_, v)| *v)
                    .collect()
            };
            if w.seen.contains(&Quantity::O3) {
                out.push(aqi_o3(id.as_str(), t, &in_window(&w.o3, O3_WINDOW_S)));
            }
            if w.seen.contains(&Quantity::Pm25) {
                out.push(aqi_pm(id.as_str(), t, &in_window(&w.pm, PM_WINDOW_S)));
            }
            let inputs: Option<Vec<f64>> = THERMAL_INPUTS
                .iter()
                .map(|q| w.latest.get(q).filter(|(ts, _)| *ts < t).map(|(_, v)| *v))
                .collect();
            if let Some(v) = inputs {
                if let Ok(iv) = tci(self.model.as_ref(), id.as_str(), t, v[0], v[1], v[2], v[3]) {
                    out.push(iv);
                }
            }
        }
        out
    }
}

/// Recomputes indexes from scratch for one ingestion instant.
pub fn update_indexes_on_ingest(engine: &mut IndexEngine, arrived: &[Measurement], t: Timestamp) -> Vec<IndexValue> {
    for m in arrived {
        engine.ingest(m);
    }
    engine.update(t)
}

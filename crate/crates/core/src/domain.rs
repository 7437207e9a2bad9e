//! Core value types shared by every other module.
//!
//! Everything here is an immutable value. Behavior is limited to
//! validation, unit conversion and the canonical numeric forms used by the
//! store's line format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by [`haversine_distance`], in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Molar mass of carbon monoxide, g/mol.
pub const CO_MOLAR_MASS: f64 = 28.01;

/// Molar volume of an ideal gas at 25 °C and 1013.25 hPa, L/mol.
pub const MOLAR_VOLUME_25C: f64 = 24.45;

/// Converts a CO mixing ratio in ppm to a mass concentration in mg/m³
/// at 25 °C and 1013.25 hPa.
pub fn co_ppm_to_mg_m3(ppm: f64) -> f64 {
    ppm * CO_MOLAR_MASS / MOLAR_VOLUME_25C
}

/// Inverse of [`co_ppm_to_mg_m3`].
pub fn co_mg_m3_to_ppm(mg_m3: f64) -> f64 {
    mg_m3 * MOLAR_VOLUME_25C / CO_MOLAR_MASS
}

/// UTC seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn offset(self, seconds: i64) -> Timestamp {
        Timestamp(self.0 + seconds)
    }

    /// `YYYY-MM-DDTHH:MM:SSZ`.
    pub fn to_iso8601(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Secs, true),
            None => format!("@{}", self.0),
        }
    }

    pub fn parse_iso8601(s: &str) -> Result<Timestamp, ParseError> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.timestamp()))
            .map_err(|e| ParseError::new("timestamp", format!("{s:?}: {e}")))
    }

    /// Calendar day (`YYYY-MM-DD`) the timestamp falls on.
    pub fn day(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.format("%Y-%m-%d").to_string(),
            None => "invalid".to_string(),
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

/// Opaque node identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> NodeId {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// WGS84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<GeoPoint, ValidationError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(ValidationError::new("position", "non-finite coordinate"));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(ValidationError::new("position", "out of range"));
        }
        Ok(())
    }

    /// Coordinates rounded to 1e-6 degrees, the resolution of the line format.
    pub fn canonical(self) -> GeoPoint {
        GeoPoint {
            lat: canonical_coord(self.lat),
            lon: canonical_coord(self.lon),
        }
    }
}

/// Great-circle distance on a spherical Earth, in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Rounds `v` to 6 significant decimal digits.
///
/// The shortest round-trip decimal form of the result never has more than
/// six significant digits, so the store's text format reproduces it exactly.
pub fn canonical_value(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

/// Rounds a coordinate to 1e-6 degrees (about 0.1 m).
pub fn canonical_coord(deg: f64) -> f64 {
    if !deg.is_finite() {
        return deg;
    }
    format!("{deg:.6}").parse().unwrap_or(deg)
}

/// Every physical quantity the network measures. The unit of each is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Quantity {
    Temperature,
    RelativeHumidity,
    DewPoint,
    WindSpeed,
    RadiantTemperature,
    Pm25,
    Hc,
    Co2,
    Co,
    O3,
    Pressure,
    SolarRadiation,
    Rain,
}

impl Quantity {
    pub const ALL: [Quantity; 13] = [
        Quantity::Temperature,
        Quantity::RelativeHumidity,
        Quantity::DewPoint,
        Quantity::WindSpeed,
        Quantity::RadiantTemperature,
        Quantity::Pm25,
        Quantity::Hc,
        Quantity::Co2,
        Quantity::Co,
        Quantity::O3,
        Quantity::Pressure,
        Quantity::SolarRadiation,
        Quantity::Rain,
    ];

    /// Short code used in files and on the command line.
    pub fn code(self) -> &'static str {
        match self {
            Quantity::Temperature => "TEMP",
            Quantity::RelativeHumidity => "RH",
            Quantity::DewPoint => "DEWPT",
            Quantity::WindSpeed => "WIND",
            Quantity::RadiantTemperature => "TRAD",
            Quantity::Pm25 => "PM25",
            Quantity::Hc => "HC",
            Quantity::Co2 => "CO2",
            Quantity::Co => "CO",
            Quantity::O3 => "O3",
            Quantity::Pressure => "PRES",
            Quantity::SolarRadiation => "SOLAR",
            Quantity::Rain => "RAIN",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Quantity::Temperature | Quantity::DewPoint | Quantity::RadiantTemperature => "degC",
            Quantity::RelativeHumidity => "%",
            Quantity::WindSpeed => "m/s",
            Quantity::Pm25 | Quantity::O3 => "ug/m3",
            Quantity::Hc | Quantity::Co2 => "ppmV",
            Quantity::Co => "mg/m3",
            Quantity::Pressure => "hPa",
            Quantity::SolarRadiation => "W/m2",
            Quantity::Rain => "mm",
        }
    }

    /// Quantities whose values may never be negative.
    pub fn is_non_negative(self) -> bool {
        matches!(
            self,
            Quantity::Pm25
                | Quantity::Hc
                | Quantity::Co2
                | Quantity::Co
                | Quantity::O3
                | Quantity::WindSpeed
                | Quantity::RelativeHumidity
                | Quantity::SolarRadiation
                | Quantity::Rain
        )
    }

    /// Quantities measured by the NDIR gas sensor (warm-up, LoD, 1 ppm steps).
    pub fn is_ndir_gas(self) -> bool {
        matches!(self, Quantity::Hc | Quantity::Co2 | Quantity::Co)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Quantity {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Quantity::ALL
            .iter()
            .copied()
            .find(|q| q.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| ParseError::new("quantity", format!("unknown code {s:?}")))
    }
}

impl TryFrom<String> for Quantity {
    type Error = ParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Quantity> for String {
    fn from(q: Quantity) -> String {
        q.code().to_string()
    }
}

/// Quality flag attached to a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    BelowLoD,
    WarmingUp,
    Quantized,
}

impl Flag {
    pub const ALL: [Flag; 3] = [Flag::BelowLoD, Flag::WarmingUp, Flag::Quantized];

    pub fn name(self) -> &'static str {
        match self {
            Flag::BelowLoD => "BelowLoD",
            Flag::WarmingUp => "WarmingUp",
            Flag::Quantized => "Quantized",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Flag::BelowLoD => 1,
            Flag::WarmingUp => 2,
            Flag::Quantized => 4,
        }
    }
}

/// Set of [`Flag`]s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags(u8);

impl Flags {
    pub const NONE: Flags = Flags(0);

    pub fn contains(self, flag: Flag) -> bool {
        self.0 & flag.bit() != 0
    }

    pub fn insert(&mut self, flag: Flag) {
        self.0 |= flag.bit();
    }

    pub fn with(mut self, flag: Flag) -> Flags {
        self.insert(flag);
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Flag> {
        Flag::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    /// True when the value may feed means and index windows. `Quantized`
    /// is informational and does not degrade a reading.
    pub fn is_usable(self) -> bool {
        !self.contains(Flag::BelowLoD) && !self.contains(Flag::WarmingUp)
    }

    pub fn parse(s: &str) -> Result<Flags, ParseError> {
        let mut flags = Flags::NONE;
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let flag = Flag::ALL
                .into_iter()
                .find(|f| f.name() == part)
                .ok_or_else(|| ParseError::new("flags", format!("unknown flag {part:?}")))?;
            flags.insert(flag);
        }
        Ok(flags)
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Flag::name).collect();
        f.write_str(&names.join(";"))
    }
}

/// One geo-referenced, timestamped sensor reading.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub node_id: NodeId,
    pub timestamp: Timestamp,
    pub position: GeoPoint,
    pub quantity: Quantity,
    pub value: f64,
    pub flags: Flags,
}

impl Measurement {
    /// Ordering key used by batches, the store and queries.
    pub fn sort_key(&self) -> (Timestamp, &NodeId, Quantity) {
        (self.timestamp, &self.node_id, self.quantity)
    }

    /// Value and position rounded to the line format's precision.
    pub fn canonical(mut self) -> Measurement {
        self.value = canonical_value(self.value);
        self.position = self.position.canonical();
        self
    }

    pub fn is_usable(&self) -> bool {
        self.flags.is_usable()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> ValidationError {
        ValidationError {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse {field}: {reason}")]
pub struct ParseError {
    pub field: &'static str,
    pub reason: String,
}

impl ParseError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> ParseError {
        ParseError {
            field,
            reason: reason.into(),
        }
    }
}

/// Returns `m` unchanged when every value-level invariant holds.
pub fn validate_measurement(m: Measurement) -> Result<Measurement, ValidationError> {
    if m.node_id.0.is_empty() {
        return Err(ValidationError::new("node_id", "empty"));
    }
    m.position.validate()?;
    if !m.value.is_finite() {
        return Err(ValidationError::new("value", "not finite"));
    }
    if m.quantity.is_non_negative() && m.value < 0.0 {
        return Err(ValidationError::new("value", "negative"));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Fixed,
    Mobile,
    Coordinator,
    WeatherStation,
}

/// Radio interfaces. `ShortRangeFixed` is the 169 MHz WMBus link,
/// `ShortRangeMobile` the 2.4 GHz ZigBee link, `WideArea` GPRS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radio {
    ShortRangeFixed,
    ShortRangeMobile,
    WideArea,
}

/// Sensor suite of a fixed node. PM2.5 is optional per node.
pub const FIXED_SUITE: [Quantity; 11] = [
    Quantity::Temperature,
    Quantity::RelativeHumidity,
    Quantity::DewPoint,
    Quantity::WindSpeed,
    Quantity::RadiantTemperature,
    Quantity::Pm25,
    Quantity::Hc,
    Quantity::Co2,
    Quantity::Co,
    Quantity::O3,
    Quantity::Pressure,
];

pub const MOBILE_SUITE: [Quantity; 8] = [
    Quantity::Temperature,
    Quantity::RelativeHumidity,
    Quantity::DewPoint,
    Quantity::Hc,
    Quantity::Co2,
    Quantity::Co,
    Quantity::O3,
    Quantity::Pressure,
];

pub const WEATHER_SUITE: [Quantity; 6] = [
    Quantity::Temperature,
    Quantity::RelativeHumidity,
    Quantity::DewPoint,
    Quantity::WindSpeed,
    Quantity::SolarRadiation,
    Quantity::Rain,
];

impl NodeKind {
    /// Quantities a node of this kind may carry.
    pub fn allowed_suite(self) -> &'static [Quantity] {
        match self {
            NodeKind::Fixed | NodeKind::Coordinator => &FIXED_SUITE,
            NodeKind::Mobile => &MOBILE_SUITE,
            NodeKind::WeatherStation => &WEATHER_SUITE,
        }
    }

    pub fn required_radios(self) -> &'static [Radio] {
        match self {
            NodeKind::Mobile => &[Radio::ShortRangeFixed, Radio::ShortRangeMobile, Radio::WideArea],
            NodeKind::Coordinator => &[Radio::ShortRangeFixed, Radio::WideArea],
            NodeKind::Fixed | NodeKind::WeatherStation => &[Radio::ShortRangeFixed],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub sensor_suite: BTreeSet<Quantity>,
    pub radios: BTreeSet<Radio>,
    /// Present for every kind except `Mobile`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home_position: Option<GeoPoint>,
}

impl NodeDescriptor {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.node_id.0.is_empty() || self.node_id.0.contains([',', ';', '\n', '/']) {
            return Err(ValidationError::new("node_id", format!("{:?} is not a valid id", self.node_id.0)));
        }
        for radio in self.kind.required_radios() {
            if !self.radios.contains(radio) {
                return Err(ValidationError::new(
                    "radios",
                    format!("{} node {} lacks {:?}", kind_name(self.kind), self.node_id, radio),
                ));
            }
        }
        let allowed = self.kind.allowed_suite();
        if let Some(q) = self.sensor_suite.iter().find(|q| !allowed.contains(q)) {
            return Err(ValidationError::new(
                "sensor_suite",
                format!("{} cannot be measured by {} node {}", q, kind_name(self.kind), self.node_id),
            ));
        }
        match (self.kind, self.home_position) {
            (NodeKind::Mobile, _) => {}
            (_, Some(p)) => p.validate()?,
            (_, None) => {
                return Err(ValidationError::new(
                    "home_position",
                    format!("missing for {} node {}", kind_name(self.kind), self.node_id),
                ))
            }
        }
        Ok(())
    }

    pub fn has_ndir_gas(&self) -> bool {
        self.sensor_suite.iter().any(|q| q.is_ndir_gas())
    }
}

fn kind_name(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Fixed => "fixed",
        NodeKind::Mobile => "mobile",
        NodeKind::Coordinator => "coordinator",
        NodeKind::WeatherStation => "weather station",
    }
}

/// Measurements a coordinator uplinks to the server in one T_I interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBatch {
    pub coordinator_id: NodeId,
    pub uplink_time: Timestamp,
    pub measurements: Vec<Measurement>,
}

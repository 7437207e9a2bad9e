//! Population statistics for comparing two groups of measurements:
//! empirical PMFs, means, the relative error between means, and the
//! proximity association of mobile readings to fixed stations.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{haversine_distance, Flag, GeoPoint, Measurement, NodeId, Quantity};
use crate::indexes::mean;

/// Default association radius around a fixed station, meters.
pub const DEFAULT_RADIUS_M: f64 = 500.0;

/// Default number of equal-width bins of a comparison PMF.
pub const DEFAULT_BINS: usize = 30;

/// Distances closer than this are treated as ties by the association.
const TIE_EPSILON_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("no samples to estimate a distribution from")]
    EmptySample,
    #[error("sample {0} is not finite")]
    NonFiniteSample(f64),
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("reference mean is zero")]
    DivisionByZero,
    #[error("the populations share no comparable quantity")]
    NoOverlap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Binning {
    /// Ascending bin edges; `n + 1` edges make `n` bins.
    Edges(Vec<f64>),
    /// `count` equal-width bins over `[min, max]`.
    Uniform { count: usize, min: f64, max: f64 },
}

impl Binning {
    fn edges(&self) -> Result<Vec<f64>, AnalyticsError> {
        match self {
            Binning::Edges(edges) => {
                if edges.len() < 2 {
                    return Err(AnalyticsError::InvalidBinning("need at least two edges".into()));
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(AnalyticsError::InvalidBinning("edges must be finite and strictly ascending".into()));
                }
                Ok(edges.clone())
            }
            &Binning::Uniform { count, min, max } => {
                if count == 0 || !min.is_finite() || !max.is_finite() || min > max {
                    return Err(AnalyticsError::InvalidBinning(format!("{count} bins over [{min}, {max}]")));
                }
                if min == max {
                    // a degenerate range gets one unit-width bin around the value
                    return Ok(vec![min - 0.5, max + 0.5]);
                }
                let width = (max - min) / count as f64;
                let mut edges: Vec<f64> = (0..count).map(|i| min + width * i as f64).collect();
                edges.push(max);
                Ok(edges)
            }
        }
    }
}

/// Empirical probability mass function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pmf {
    pub quantity: Quantity,
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub n_samples: usize,
}

impl Pmf {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// Two whitespace-separated columns, bin center and probability, with a
    /// `#` header line.
    pub fn to_plot_data(&self) -> String {
        let mut out = format!("# {} ({}) n={}\n# bin_center probability\n", self.quantity, self.quantity.unit(), self.n_samples);
        for (c, p) in self.bin_centers().iter().zip(&self.probabilities) {
            out.push_str(&format!("{c} {p}\n"));
        }
        out
    }
}

/// Normalized histogram of `samples`. Samples outside explicit edges are
/// counted in the nearest end bin; the last bin is closed on the right.
pub fn estimate_pmf(quantity: Quantity, samples: &[f64], binning: &Binning) -> Result<Pmf, AnalyticsError> {
    if samples.is_empty() {
        return Err(AnalyticsError::EmptySample);
    }
    if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFiniteSample(bad));
    }
    let edges = binning.edges()?;
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        // number of interior edges <= x
        let i = edges[1..bins].partition_point(|&e| e <= x);
        counts[i] += 1;
    }
    let n = samples.len() as f64;
    Ok(Pmf {
        quantity,
        bin_edges: edges,
        probabilities: counts.into_iter().map(|c| c as f64 / n).collect(),
        n_samples: samples.len(),
    })
}

/// `|1 - m_a / m_b|`.
pub fn relative_error(m_a: f64, m_b: f64) -> Result<f64, AnalyticsError> {
    if m_b == 0.0 {
        return Err(AnalyticsError::DivisionByZero);
    }
    Ok((1.0 - m_a / m_b).abs())
}

/// Rounds to `digits` significant figures, as shown in emitted reports.
pub fn round_significant(v: f64, digits: u32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let magnitude = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits as i32 - 1 - magnitude);
    (v * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Station {
    pub id: NodeId,
    pub position: GeoPoint,
}

/// Partition of mobile samples (by index into the input slice).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    pub by_station: BTreeMap<NodeId, Vec<usize>>,
    pub unassociated: Vec<usize>,
}

impl Association {
    pub fn associated_count(&self) -> usize {
        self.by_station.values().map(Vec::len).sum()
    }
}

/// Nearest station within `radius_m`, ties going to the lower station id.
pub fn nearest_station(p: GeoPoint, stations: &[Station], radius_m: f64) -> Option<&Station> {
    let mut best: Option<(&Station, f64)> = None;
    for s in stations {
        let d = haversine_distance(p, s.position);
        if d > radius_m {
            continue;
        }
        best = match best {
            None => Some((s, d)),
            Some((_, bd)) if d < bd - TIE_EPSILON_M => Some((s, d)),
            Some((b, bd)) if (d - bd).abs() <= TIE_EPSILON_M && s.id < b.id => Some((s, d)),
            keep => keep,
        };
    }
    best.map(|(s, _)| s)
}

pub fn associate_mobile_to_fixed(mobile: &[Measurement], stations: &[Station], radius_m: f64) -> Association {
    let mut out = Association::default();
    for (i, m) in mobile.iter().enumerate() {
        match nearest_station(m.position, stations, radius_m) {
            Some(s) => out.by_station.entry(s.id.clone()).or_default().push(i),
            None => out.unassociated.push(i),
        }
    }
    out
}

/// How PMF bins are chosen per quantity.
#[derive(Debug, Clone, PartialEq)]
pub enum BinningPolicy {
    /// Equal-width bins spanning the pooled min and max of both populations.
    Pooled(usize),
    /// Fixed binning for listed quantities; others fall back to pooled.
    Explicit(BTreeMap<Quantity, Binning>, usize),
}

impl Default for BinningPolicy {
    fn default() -> Self {
        BinningPolicy::Pooled(DEFAULT_BINS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantityComparison {
    pub quantity: Quantity,
    pub unit: &'static str,
    pub mean_a: f64,
    pub mean_b: f64,
    pub eta: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub below_lod_rate_a: f64,
    pub below_lod_rate_b: f64,
    pub pmf_a: Pmf,
    pub pmf_b: Pmf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub population_a: String,
    pub population_b: String,
    pub rows: Vec<QuantityComparison>,
    /// Quantities with usable samples in only one population.
    pub incomparable: Vec<Quantity>,
}

#[derive(Default)]
struct Population {
    usable: Vec<f64>,
    below_lod: usize,
}

impl Population {
    fn below_lod_rate(&self) -> f64 {
        let total = self.usable.len() + self.below_lod;
        if total == 0 {
            0.0
        } else {
            self.below_lod as f64 / total as f64
        }
    }
}

fn split(ms: &[Measurement]) -> BTreeMap<Quantity, Population> {
    let mut out: BTreeMap<Quantity, Population> = BTreeMap::new();
    for m in ms {
        if m.flags.contains(Flag::WarmingUp) {
            continue;
        }
        let p = out.entry(m.quantity).or_default();
        if m.flags.contains(Flag::BelowLoD) {
            p.below_lod += 1;
        } else {
            p.usable.push(m.value);
        }
    }
    out
}

/// Per-quantity means, relative error `|1 - M_a/M_b|` and PMFs of two
/// populations. Warm-up readings are ignored; below-LoD readings are left
/// out of means and PMFs and reported as a rate.
pub fn compare_populations(
    label_a: &str,
    a: &[Measurement],
    label_b: &str,
    b: &[Measurement],
    binning: &BinningPolicy,
) -> Result<ComparisonReport, AnalyticsError> {
    let pa = split(a);
    let pb = split(b);
    let quantities: BTreeSet<Quantity> = pa.keys().chain(pb.keys()).copied().collect();
    let mut rows = Vec::new();
    let mut incomparable = Vec::new();
    for q in quantities {
        let (Some(xa), Some(xb)) = (pa.get(&q), pb.get(&q)) else {
            incomparable.push(q);
            continue;
        };
        if xa.usable.is_empty() || xb.usable.is_empty() {
            incomparable.push(q);
            continue;
        }
        let mean_a = mean(&xa.usable).expect("non-empty");
        let mean_b = mean(&xb.usable).expect("non-empty");
        let bins = match binning {
            BinningPolicy::Explicit(map, _) if map.contains_key(&q) => map[&q].clone(),
            BinningPolicy::Explicit(_, count) | BinningPolicy::Pooled(count) => {
                let all = xa.usable.iter().chain(&xb.usable);
                let min = all.clone().copied().fold(f64::INFINITY, f64::min);
                let max = all.copied().fold(f64::NEG_INFINITY, f64::max);
                Binning::Uniform { count: *count, min, max }
            }
        };
        rows.push(QuantityComparison {
            quantity: q,
            unit: q.unit(),
            mean_a,
            mean_b,
            eta: relative_error(mean_a, mean_b)?,
            n_a: xa.usable.len(),
            n_b: xb.usable.len(),
            below_lod_rate_a: xa.below_lod_rate(),
            below_lod_rate_b: xb.below_lod_rate(),
            pmf_a: estimate_pmf(q, &xa.usable, &bins)?,
            pmf_b: estimate_pmf(q, &xb.usable, &bins)?,
        });
    }
    if rows.is_empty() {
        return Err(AnalyticsError::NoOverlap);
    }
    Ok(ComparisonReport {
        population_a: label_a.to_string(),
        population_b: label_b.to_string(),
        rows,
        incomparable,
    })
}

impl ComparisonReport {
    pub fn row(&self, q: Quantity) -> Option<&QuantityComparison> {
        self.rows.iter().find(|r| r.quantity == q)
    }

    /// Machine-readable summary. Means are kept at full precision; eta is
    /// rounded to three significant figures.
    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "quantity": r.quantity.code(),
                    "unit": r.unit,
                    "mean_a": r.mean_a,
                    "mean_b": r.mean_b,
                    "eta": round_significant(r.eta, 3),
                    "n_a": r.n_a,
                    "n_b": r.n_b,
                    "below_lod_rate_a": r.below_lod_rate_a,
                    "below_lod_rate_b": r.below_lod_rate_b,
                    "bins": r.pmf_a.probabilities.len(),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "population_a": self.population_a,
            "population_b": self.population_b,
            "eta_definition": "|1 - mean_a / mean_b|",
            "rows": rows,
            "incomparable": self.incomparable.iter().map(|q| q.code()).collect::<Vec<_>>(),
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Flags, Timestamp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn m(q: Quantity, value: f64, p: GeoPoint) -> Measurement {
        Measurement {
            node_id: NodeId::new("M1"),
            timestamp: Timestamp(0),
            position: p,
            quantity: q,
            value,
            flags: Flags::NONE,
        }
    }

    /// Point `meters` east of `p` along its parallel.
    fn east(p: GeoPoint, meters: f64) -> GeoPoint {
        let dlon = (meters / (crate::domain::EARTH_RADIUS_M * p.lat.to_radians().cos())).to_degrees();
        at(p.lat, p.lon + dlon)
    }

    const ORIGIN: GeoPoint = GeoPoint { lat: 43.7167, lon: 10.4 };

    #[test]
    fn identical_samples_single_bin() {
        let pmf = estimate_pmf(Quantity::Co2, &[420.0; 12], &Binning::Uniform { count: 30, min: 420.0, max: 420.0 }).unwrap();
        assert_eq!(pmf.probabilities, vec![1.0]);
        assert_eq!(pmf.n_samples, 12);
    }

    #[test]
    fn uniform_samples_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let pmf = estimate_pmf(Quantity::O3, &samples, &Binning::Uniform { count: 10, min: 0.0, max: 1.0 }).unwrap();
        for p in &pmf.probabilities {
            assert!((p - 0.1).abs() <= 0.02, "{p}");
        }
    }

    #[test]
    fn empty_and_bad_input() {
        assert_eq!(
            estimate_pmf(Quantity::O3, &[], &Binning::Uniform { count: 3, min: 0.0, max: 1.0 }),
            Err(AnalyticsError::EmptySample)
        );
        assert!(matches!(
            estimate_pmf(Quantity::O3, &[1.0], &Binning::Edges(vec![2.0, 1.0])),
            Err(AnalyticsError::InvalidBinning(_))
        ));
    }

    #[test]
    fn explicit_edges_clamp_outliers() {
        let pmf = estimate_pmf(Quantity::O3, &[-5.0, 0.5, 1.5, 2.0, 9.0], &Binning::Edges(vec![0.0, 1.0, 2.0])).unwrap();
        assert_eq!(pmf.probabilities, vec![0.4, 0.6]);
    }

    #[test]
    fn relative_error_cases() {
        assert!((relative_error(423.26, 451.1).unwrap() - 0.0617).abs() < 5e-5);
        assert!((relative_error(5.4, 3.08).unwrap() - 0.753).abs() < 5e-4);
        assert_eq!(relative_error(7.0, 7.0).unwrap(), 0.0);
        assert_eq!(relative_error(1.0, 0.0), Err(AnalyticsError::DivisionByZero));
    }

    #[test]
    fn round_significant_cases() {
        assert_eq!(round_significant(0.061_718, 3), 0.0617);
        assert_eq!(round_significant(0.753_246, 2), 0.75);
        assert_eq!(round_significant(1955.639, 4), 1956.0);
    }

    #[test]
    fn association_nearest_within_radius() {
        let a = Station { id: NodeId::new("A"), position: ORIGIN };
        let b = Station { id: NodeId::new("B"), position: east(ORIGIN, 900.0) };
        let stations = [a, b];
        let samples = [
            m(Quantity::O3, 1.0, east(ORIGIN, 100.0)),
            m(Quantity::O3, 1.0, east(ORIGIN, -600.0)),
        ];
        let assoc = associate_mobile_to_fixed(&samples, &stations, DEFAULT_RADIUS_M);
        assert_eq!(assoc.by_station[&NodeId::new("A")], vec![0]);
        assert_eq!(assoc.unassociated, vec![1]);
    }

    #[test]
    fn association_tie_goes_to_lower_id() {
        let stations = [
            Station { id: NodeId::new("B"), position: east(ORIGIN, 300.0) },
            Station { id: NodeId::new("A"), position: east(ORIGIN, -300.0) },
        ];
        let assoc = associate_mobile_to_fixed(&[m(Quantity::O3, 1.0, ORIGIN)], &stations, DEFAULT_RADIUS_M);
        assert_eq!(assoc.by_station.keys().cloned().collect::<Vec<_>>(), vec![NodeId::new("A")]);
    }

    #[test]
    fn compare_identical_populations() {
        let pop: Vec<_> = (0..50)
            .flat_map(|i| [m(Quantity::O3, 40.0 + i as f64, ORIGIN), m(Quantity::Co2, 400.0 + i as f64, ORIGIN)])
            .collect();
        let report = compare_populations("a", &pop, "b", &pop, &BinningPolicy::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.eta == 0.0));
        assert!(report.rows.iter().all(|r| r.pmf_a == r.pmf_b));
        assert!(report.rows.iter().all(|r| r.pmf_a.probabilities.len() == DEFAULT_BINS));
    }

    #[test]
    fn compare_single_shared_quantity() {
        let a = [m(Quantity::O3, 40.0, ORIGIN), m(Quantity::Pm25, 12.0, ORIGIN)];
        let b = [m(Quantity::O3, 50.0, ORIGIN), m(Quantity::Hc, 3.0, ORIGIN)];
        let report = compare_populations("a", &a, "b", &b, &BinningPolicy::default()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!((report.rows[0].eta - 0.2).abs() < 1e-12);
        assert_eq!(report.incomparable, vec![Quantity::Pm25, Quantity::Hc]);
    }

    #[test]
    fn compare_no_overlap() {
        let a = [m(Quantity::O3, 40.0, ORIGIN)];
        let b = [m(Quantity::Hc, 3.0, ORIGIN)];
        assert_eq!(
            compare_populations("a", &a, "b", &b, &BinningPolicy::default()),
            Err(AnalyticsError::NoOverlap)
        );
    }

    #[test]
    fn below_lod_excluded_from_mean_but_counted() {
        let mut low = m(Quantity::Hc, 0.0, ORIGIN);
        low.flags.insert(Flag::BelowLoD);
        let mut warm = m(Quantity::Hc, 99.0, ORIGIN);
        warm.flags.insert(Flag::WarmingUp);
        let a = [low, warm, m(Quantity::Hc, 6.0, ORIGIN), m(Quantity::Hc, 8.0, ORIGIN)];
        let b = [m(Quantity::Hc, 7.0, ORIGIN)];
        let report = compare_populations("a", &a, "b", &b, &BinningPolicy::default()).unwrap();
        let row = report.row(Quantity::Hc).unwrap();
        assert_eq!(row.mean_a, 7.0);
        assert_eq!(row.n_a, 2);
        assert!((row.below_lod_rate_a - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(row.eta, 0.0);
    }

    #[test]
    fn report_json_rounds_eta() {
        let a = [m(Quantity::Co2, 423.26, ORIGIN)];
        let b = [m(Quantity::Co2, 451.1, ORIGIN)];
        let report = compare_populations("traffic", &a, "fitness", &b, &BinningPolicy::default()).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(doc["rows"][0]["eta"], serde_json::json!(0.0617));
        assert_eq!(doc["rows"][0]["mean_a"], serde_json::json!(423.26));
    }

    proptest! {
        #[test]
        fn pmf_mass_is_one(samples in proptest::collection::vec(-1e3f64..1e3, 1..500), bins in 1usize..50) {
            let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pmf = estimate_pmf(Quantity::Temperature, &samples, &Binning::Uniform { count: bins, min, max }).unwrap();
            prop_assert!((pmf.total_mass() - 1.0).abs() <= 1e-9);
            prop_assert!(pmf.probabilities.iter().all(|p| *p >= 0.0));
            prop_assert_eq!(pmf.bin_edges.len(), pmf.probabilities.len() + 1);
        }

        #[test]
        fn eta_scale_invariant(a in 0.1f64..1e3, b in 0.1f64..1e3, c in 0.01f64..100.0) {
            let e1 = relative_error(a, b).unwrap();
            let e2 = relative_error(c * a, c * b).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-12 * e1.max(1.0));
        }

        #[test]
        fn association_partitions_every_sample(offsets in proptest::collection::vec((-1500.0f64..1500.0, -1500.0f64..1500.0), 1..60)) {
            let stations = [
                Station { id: NodeId::new("F1"), position: ORIGIN },
                Station { id: NodeId::new("F2"), position: east(ORIGIN, 700.0) },
            ];
            let samples: Vec<_> = offsets.iter().map(|&(dx, dy)| {
                let p = east(ORIGIN, dx);
                m(Quantity::O3, 1.0, at(p.lat + (dy / crate::domain::EARTH_RADIUS_M).to_degrees(), p.lon))
            }).collect();
            let a1 = associate_mobile_to_fixed(&samples, &stations, DEFAULT_RADIUS_M);
            let a2 = associate_mobile_to_fixed(&samples, &stations, DEFAULT_RADIUS_M);
            prop_assert_eq!(&a1, &a2);
            let mut seen: Vec<usize> = a1.by_station.values().flatten().copied().chain(a1.unassociated.iter().copied()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..samples.len()).collect::<Vec<_>>());
        }
    }
}

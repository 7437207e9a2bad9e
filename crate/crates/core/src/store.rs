//! Append-only measurement store, partitioned into one text file per UTC day.
//!
//! Each line is one measurement:
//!
//! ```text
//! 2015-04-01T00:05:00Z,F1,43.7167,10.4,CO2,451,ppmV,Quantized
//! ```
//!
//! Fields are timestamp, node id, latitude, longitude, quantity code, value,
//! unit and `;`-joined flags (possibly empty). Numbers use `.` as decimal
//! separator and the shortest form that parses back to the same double.
//! Values hold at most six significant digits and coordinates at most six
//! decimals; [`Store::append`] rounds anything finer. Lines within a file are
//! sorted by (timestamp, node id, quantity).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{
    haversine_distance, validate_measurement, Flags, GeoPoint, Measurement, NodeId, ParseError, Quantity, Timestamp,
    ValidationError,
};

const PARTITION_DIR: &str = "measurements";
const PARTITION_EXT: &str = "csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: ParseError },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Serializes one measurement as a record line (without newline).
pub fn format_record(m: &Measurement) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.timestamp.to_iso8601(),
        m.node_id,
        m.position.lat,
        m.position.lon,
        m.quantity.code(),
        m.value,
        m.quantity.unit(),
        m.flags
    )
}

fn parse_f64(field: &'static str, s: &str) -> Result<f64, ParseError> {
    s.parse::<f64>().map_err(|e| ParseError::new(field, format!("{s:?}: {e}")))
}

pub fn parse_record(line: &str) -> Result<Measurement, ParseError> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
    let [ts, node, lat, lon, quantity, value, unit, flags] = fields[..] else {
        return Err(ParseError::new("record", format!("expected 8 fields, found {}", fields.len())));
    };
    let quantity: Quantity = quantity.parse()?;
    if unit != quantity.unit() {
        return Err(ParseError::new("unit", format!("{unit:?} does not match {quantity} ({})", quantity.unit())));
    }
    if node.is_empty() {
        return Err(ParseError::new("node_id", "empty"));
    }
    Ok(Measurement {
        node_id: NodeId::new(node),
        timestamp: Timestamp::parse_iso8601(ts)?,
        position: GeoPoint {
            lat: parse_f64("lat", lat)?,
            lon: parse_f64("lon", lon)?,
        },
        quantity,
        value: parse_f64("value", value)?,
        flags: Flags::parse(flags)?,
    })
}

/// Selection criteria of [`Store::query`]. Every present clause must match.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFilter {
    pub from: Timestamp,
    pub until: Timestamp,
    pub nodes: Option<BTreeSet<NodeId>>,
    pub quantities: Option<BTreeSet<Quantity>>,
    pub circle: Option<(GeoPoint, f64)>,
}

impl QueryFilter {
    /// Half-open time range `[from, until)`.
    pub fn new(from: Timestamp, until: Timestamp) -> Result<QueryFilter, StoreError> {
        if from > until {
            return Err(StoreError::InvalidQuery(format!("range starts after it ends ({from} > {until})")));
        }
        Ok(QueryFilter {
            from,
            until,
            nodes: None,
            quantities: None,
            circle: None,
        })
    }

    pub fn everything() -> QueryFilter {
        QueryFilter {
            from: Timestamp(i64::MIN),
            until: Timestamp(i64::MAX),
            nodes: None,
            quantities: None,
            circle: None,
        }
    }

    pub fn nodes(mut self, ids: impl IntoIterator<Item = NodeId>) -> QueryFilter {
        self.nodes = Some(ids.into_iter().collect());
        self
    }

    pub fn quantities(mut self, qs: impl IntoIterator<Item = Quantity>) -> QueryFilter {
        self.quantities = Some(qs.into_iter().collect());
        self
    }

    pub fn within(mut self, center: GeoPoint, radius_m: f64) -> Result<QueryFilter, StoreError> {
        if !(radius_m > 0.0) {
            return Err(StoreError::InvalidQuery(format!("radius must be positive, got {radius_m}")));
        }
        center.validate()?;
        self.circle = Some((center, radius_m));
        Ok(self)
    }

    pub fn matches(&self, m: &Measurement) -> bool {
        m.timestamp >= self.from
            && m.timestamp < self.until
            && self.nodes.as_ref().is_none_or(|n| n.contains(&m.node_id))
            && self.quantities.as_ref().is_none_or(|q| q.contains(&m.quantity))
            && self
                .circle
                .is_none_or(|(c, r)| haversine_distance(c, m.position) <= r)
    }
}

type RecordKey = (NodeId, Timestamp, Quantity);

/// Directory-backed store. The whole data set is mirrored in memory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    days: BTreeMap<String, Vec<Measurement>>,
    keys: HashSet<RecordKey>,
}

impl Store {
    /// Opens (creating if needed) the store rooted at `dir` and loads every
    /// day partition.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = dir.as_ref().to_path_buf();
        let partitions = root.join(PARTITION_DIR);
        fs::create_dir_all(&partitions).map_err(io_err(&partitions))?;
        Self::load(root)
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = dir.as_ref().to_path_buf();
        let partitions = root.join(PARTITION_DIR);
        if !partitions.is_dir() {
            return Err(StoreError::Io {
                path: partitions,
                source: io::Error::new(io::ErrorKind::NotFound, "no measurement partitions"),
            });
        }
        Self::load(root)
    }

    fn load(root: PathBuf) -> Result<Store, StoreError> {
        let partitions = root.join(PARTITION_DIR);
        let mut files: Vec<PathBuf> = fs::read_dir(&partitions)
            .map_err(io_err(&partitions))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == PARTITION_EXT))
            .collect();
        files.sort();
        let mut store = Store {
            root,
            days: BTreeMap::new(),
            keys: HashSet::new(),
        };
        for path in files {
            let day = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
            let mut records = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if line.is_empty() {
                    continue;
                }
                let m = parse_record(&line).map_err(|source| StoreError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    source,
                })?;
                store.keys.insert((m.node_id.clone(), m.timestamp, m.quantity));
                records.push(m);
            }
            records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
            store.days.insert(day, records);
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn partition_path(&self, day: &str) -> PathBuf {
        self.root.join(PARTITION_DIR).join(format!("{day}.{PARTITION_EXT}"))
    }

    /// Persists the measurements not already stored and returns how many
    /// were written. A (node, timestamp, quantity) triple is stored once.
    pub fn append(&mut self, batch: &[Measurement]) -> Result<usize, StoreError> {
        let mut fresh: BTreeMap<String, Vec<Measurement>> = BTreeMap::new();
        let mut batch_keys = HashSet::new();
        for m in batch {
            let m = validate_measurement(m.clone().canonical())?;
            let key = (m.node_id.clone(), m.timestamp, m.quantity);
            if self.keys.contains(&key) || !batch_keys.insert(key) {
                continue;
            }
            fresh.entry(m.timestamp.day()).or_default().push(m);
        }
        let mut written = 0;
        for (day, mut records) in fresh {
            records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
            let path = self.partition_path(&day);
            let existing = self.days.entry(day).or_default();
            let in_order = match (existing.last(), records.first()) {
                (Some(last), Some(first)) => last.sort_key() < first.sort_key(),
                _ => true,
            };
            if in_order {
                let mut text = String::new();
                for m in &records {
                    text.push_str(&format_record(m));
                    text.push('\n');
                }
                let mut file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                file.write_all(text.as_bytes()).map_err(io_err(&path))?;
                file.sync_data().map_err(io_err(&path))?;
                existing.extend(records.iter().cloned());
            } else {
                existing.extend(records.iter().cloned());
                existing.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
                rewrite_partition(&path, existing)?;
            }
            written += records.len();
            for m in records {
                self.keys.insert((m.node_id, m.timestamp, m.quantity));
            }
        }
        Ok(written)
    }

    /// Matching records ordered by (timestamp, node id, quantity).
    pub fn query(&self, filter: &QueryFilter) -> Vec<Measurement> {
        let mut out: Vec<Measurement> = self
            .days
            .values()
            .flatten()
            .filter(|m| filter.matches(m))
            .cloned()
            .collect();
        // partitions are in day order already; this only guards odd file names
        out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        out
    }

    pub fn time_span(&self) -> Option<(Timestamp, Timestamp)> {
        let first = self.days.values().find_map(|d| d.first())?.timestamp;
        let last = self.days.values().rev().find_map(|d| d.last())?.timestamp;
        Some((first, last))
    }

    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.keys.iter().map(|(n, _, _)| n.clone()).collect()
    }
}

/// Writes `records` to `path` via a temporary file and rename, so readers
/// never observe a partial partition.
fn rewrite_partition(path: &Path, records: &[Measurement]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut text = String::with_capacity(records.len() * 64);
    for m in records {
        text.push_str(&format_record(m));
        text.push('\n');
    }
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes line records to `path`, replacing any previous file.
pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<(), StoreError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = String::new();
    for line in lines {
        text.push_str(line.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Flag;
    use proptest::prelude::*;

    fn m(node: &str, ts: i64, q: Quantity, value: f64) -> Measurement {
        Measurement {
            node_id: NodeId::new(node),
            timestamp: Timestamp(1_427_846_400 + ts),
            position: GeoPoint { lat: 43.7167, lon: 10.4 },
            quantity: q,
            value,
            flags: Flags::NONE,
        }
    }

    #[test]
    fn record_line_format() {
        let mut x = m("F1", 300, Quantity::Co2, 451.0);
        x.flags.insert(Flag::Quantized);
        assert_eq!(format_record(&x), "2015-04-01T00:05:00Z,F1,43.7167,10.4,CO2,451,ppmV,Quantized");
        assert_eq!(parse_record(&format_record(&x)).unwrap(), x);
    }

    #[test]
    fn parse_rejects_wrong_unit_and_field_count() {
        assert!(parse_record("2015-04-01T00:05:00Z,F1,43.7,10.4,CO2,451,ppb,").is_err());
        assert!(parse_record("2015-04-01T00:05:00Z,F1,43.7,10.4,CO2,451").is_err());
        assert!(parse_record("2015-04-01T00:05:00Z,F1,43.7,10.4,XX,451,ppmV,").is_err());
    }

    #[test]
    fn append_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let batch: Vec<_> = (0..27).map(|i| m(&format!("N{}", i % 9), 300 * (i / 9), Quantity::O3, 40.0 + i as f64)).collect();
        assert_eq!(store.append(&batch).unwrap(), 27);
        assert_eq!(store.append(&batch).unwrap(), 0);
        assert_eq!(store.append(&[]).unwrap(), 0);
        assert_eq!(store.len(), 27);
    }

    #[test]
    fn out_of_order_appends_keep_files_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store.append(&[m("M1", 900, Quantity::O3, 1.0)]).unwrap();
        store.append(&[m("F1", 300, Quantity::O3, 2.0), m("F1", 600, Quantity::O3, 3.0)]).unwrap();
        store.append(&[m("F1", 1200, Quantity::O3, 4.0)]).unwrap();
        let text = fs::read_to_string(dir.path().join("measurements/2015-04-01.csv")).unwrap();
        let stamps: Vec<&str> = text.lines().map(|l| &l[..20]).collect();
        let mut sorted = stamps.clone();
        sorted.sort();
        assert_eq!(stamps, sorted);
        assert_eq!(stamps.len(), 4);

        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.query(&QueryFilter::everything()), store.query(&QueryFilter::everything()));
    }

    #[test]
    fn partitions_by_day() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store.append(&[m("F1", 86_100, Quantity::O3, 1.0), m("F1", 86_400, Quantity::O3, 2.0)]).unwrap();
        assert!(dir.path().join("measurements/2015-04-01.csv").exists());
        assert!(dir.path().join("measurements/2015-04-02.csv").exists());
    }

    #[test]
    fn query_filters() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let mut far = m("M1", 0, Quantity::Hc, 3.0);
        far.position = GeoPoint { lat: 43.73, lon: 10.4 };
        store
            .append(&[m("F1", 0, Quantity::O3, 1.0), m("F2", 300, Quantity::Co2, 400.0), far.clone()])
            .unwrap();
        assert_eq!(store.query(&QueryFilter::everything()).len(), 3);
        let t0 = Timestamp(1_427_846_400);
        assert!(store.query(&QueryFilter::new(t0, t0).unwrap()).is_empty());
        assert!(QueryFilter::new(t0.offset(1), t0).is_err());
        let by_node = QueryFilter::everything().nodes([NodeId::new("F2")]);
        assert_eq!(store.query(&by_node)[0].quantity, Quantity::Co2);
        let by_q = QueryFilter::everything().quantities([Quantity::Hc, Quantity::O3]);
        assert_eq!(store.query(&by_q).len(), 2);
        let near = QueryFilter::everything().within(GeoPoint { lat: 43.7167, lon: 10.4 }, 500.0).unwrap();
        assert!(!store.query(&near).contains(&far));
        assert_eq!(store.query(&near).len(), 2);
        assert!(QueryFilter::everything().within(GeoPoint { lat: 0.0, lon: 0.0 }, 0.0).is_err());
    }

    #[test]
    fn rejects_invalid_measurement() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.append(&[m("F1", 0, Quantity::Pm25, -1.0)]), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn corrupt_partition_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("measurements")).unwrap();
        fs::write(dir.path().join("measurements/2015-04-01.csv"), "garbage\n").unwrap();
        match Store::open(dir.path()) {
            Err(StoreError::Corrupt { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn measurement() -> impl Strategy<Value = Measurement> {
        (
            prop::sample::select(vec!["F1", "F2", "M1", "W1"]),
            0i64..(3 * 86_400),
            43.6f64..43.8,
            10.3f64..10.5,
            prop::sample::select(Quantity::ALL.to_vec()),
            0.0f64..1000.0,
            0u8..8,
        )
            .prop_map(|(node, ts, lat, lon, quantity, value, bits)| {
                let mut flags = Flags::NONE;
                for (i, f) in Flag::ALL.into_iter().enumerate() {
                    if bits & (1 << i) != 0 {
                        flags.insert(f);
                    }
                }
                Measurement {
                    node_id: NodeId::new(node),
                    timestamp: Timestamp(1_427_846_400 + ts),
                    position: GeoPoint { lat, lon },
                    quantity,
                    value,
                    flags,
                }
                .canonical()
            })
    }

    proptest! {
        #[test]
        fn canonical_records_round_trip_bit_exact(x in measurement()) {
            let back = parse_record(&format_record(&x)).unwrap();
            prop_assert_eq!(back.value.to_bits(), x.value.to_bits());
            prop_assert_eq!(back.position.lat.to_bits(), x.position.lat.to_bits());
            prop_assert_eq!(back.position.lon.to_bits(), x.position.lon.to_bits());
            prop_assert_eq!(back, x);
        }

        #[test]
        fn query_is_append_order_invariant(mut xs in proptest::collection::vec(measurement(), 1..40), split in 0usize..40) {
            let d1 = tempfile::tempdir().unwrap();
            let d2 = tempfile::tempdir().unwrap();
            let mut s1 = Store::open(d1.path()).unwrap();
            s1.append(&xs).unwrap();
            xs.reverse();
            let cut = split.min(xs.len());
            let mut s2 = Store::open(d2.path()).unwrap();
            s2.append(&xs[..cut]).unwrap();
            s2.append(&xs[cut..]).unwrap();
            let q1 = s1.query(&QueryFilter::everything());
            let q2 = s2.query(&QueryFilter::everything());
            // duplicates keep whichever copy arrived first, so compare keys
            let k1: Vec<_> = q1.iter().map(|m| (m.node_id.clone(), m.timestamp, m.quantity)).collect();
            let k2: Vec<_> = q2.iter().map(|m| (m.node_id.clone(), m.timestamp, m.quantity)).collect();
            prop_assert_eq!(k1, k2);
        }
    }
}

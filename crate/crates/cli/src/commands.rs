use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use urbanaq_core::analytics::{
    associate_mobile_to_fixed, compare_populations, AnalyticsError, BinningPolicy, ComparisonReport, Station,
};
use urbanaq_core::domain::{Measurement, NodeId, NodeKind, Timestamp};
use urbanaq_core::indexes::{
    traffic_index, ApparentTemperatureModel, IdentityModel, IndexEngine, IndexError, IndexValue, ThermalModel,
    TrafficAccessConfig,
};
use urbanaq_core::netsim::{run_with_model, SimOutput};
use urbanaq_core::scenario::{NodeRegistry, PathRole, ScenarioConfig};
use urbanaq_core::store::{write_lines, QueryFilter, Store, StoreError};

use crate::{CompareMode, ThermalChoice};

pub const REGISTRY_FILE: &str = "nodes.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn clear_dir(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn thermal_model(choice: ThermalChoice) -> Box<dyn ThermalModel + Send + Sync> {
    match choice {
        ThermalChoice::Apparent => Box::new(ApparentTemperatureModel),
        ThermalChoice::Identity => Box::new(IdentityModel),
    }
}

fn load_scenario(spec: &str) -> Result<ScenarioConfig, CliError> {
    let path = Path::new(spec);
    if path.exists() {
        return ScenarioConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    ScenarioConfig::builtin(spec)
        .ok_or_else(|| CliError::Config(format!("scenario file {} not found and not a bundled scenario", path.display())))
}

/// Writes index records into one file per station under `dir`.
fn write_index_files(dir: &Path, values: &[IndexValue]) -> Result<(), CliError> {
    clear_dir(dir)?;
    let mut by_station: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for v in values {
        by_station.entry(&v.station_id).or_default().push(v.to_record());
    }
    for (station, lines) in by_station {
        write_lines(&dir.join(format!("{station}.csv")), lines)?;
    }
    Ok(())
}

fn print_summary(out: &SimOutput) {
    println!("{:<8} {:>9} {:>10} {:>7}", "node", "emitted", "delivered", "lost");
    for (id, stats) in &out.stats {
        let t = stats.total();
        println!("{:<8} {:>9} {:>10} {:>7}", id.as_str(), t.emitted, t.delivered, t.lost);
    }
    let t = out.totals();
    println!("{:<8} {:>9} {:>10} {:>7}", "total", t.emitted, t.delivered, t.lost);
    println!("loss rate {:.3}%", 100.0 * out.loss_rate());
    let empty = out.uplinks.iter().filter(|u| u.size == 0).count();
    let lost = out.uplinks.iter().filter(|u| u.lost).count();
    println!("uplinks {} ({empty} empty, {lost} lost)", out.uplinks.len());
}

pub fn simulate(spec: &str, out: &Path, seed: Option<u64>, model: ThermalChoice) -> Result<(), CliError> {
    let mut cfg = load_scenario(spec)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let scenario = cfg.resolve().map_err(|e| CliError::Config(e.to_string()))?;
    for id in scenario.unreachable_static_nodes() {
        eprintln!("warning: node {id} is out of short-range reach of coordinator {}", scenario.coordinator);
    }
    let result = run_with_model(&scenario, thermal_model(model)).map_err(|e| CliError::Config(e.to_string()))?;

    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    clear_dir(&out.join("measurements"))?;
    let mut store = Store::open(out)?;
    store.append(&result.received)?;

    write_lines(&out.join("delivery_log.csv"), result.delivery_log.iter().map(|r| r.to_record()))?;
    write_lines(
        &out.join("uplinks.csv"),
        result.uplinks.iter().map(|u| {
            let status = if u.size == 0 {
                "empty"
            } else if u.lost {
                "lost"
            } else {
                "delivered"
            };
            format!("{},{},{status}", u.uplink_time.to_iso8601(), u.size)
        }),
    )?;
    write_index_files(&out.join("indexes"), &result.index_updates)?;
    write(&out.join(REGISTRY_FILE), &scenario.registry().to_json())?;
    let resolved = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write(&out.join("scenario.toml"), &resolved)?;

    println!(
        "scenario {} seed {} from {} for {} s",
        scenario.name,
        scenario.seed,
        scenario.start.to_iso8601(),
        scenario.duration_s
    );
    print_summary(&result);
    let days = store.time_span().map_or(0, |(a, b)| (b.0.div_euclid(86_400) - a.0.div_euclid(86_400) + 1) as usize);
    println!("stored {} measurements over {days} day(s) in {}", store.len(), out.display());
    Ok(())
}

fn load_registry(data: &Path) -> Result<Option<NodeRegistry>, CliError> {
    let path = data.join(REGISTRY_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    NodeRegistry::from_json(&text)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_registry(data: &Path) -> Result<NodeRegistry, CliError> {
    load_registry(data)?.ok_or_else(|| {
        CliError::Data(format!("{} is missing; it is written by `urbanaq simulate`", data.join(REGISTRY_FILE).display()))
    })
}

pub fn indexes(data: &Path, out: &Path, model: ThermalChoice, period_s: i64) -> Result<(), CliError> {
    if period_s <= 0 {
        return Err(CliError::Config(format!("--period-s must be positive, got {period_s}")));
    }
    let store = Store::open_existing(data)?;
    let registry = load_registry(data)?;
    let mobile = registry
        .as_ref()
        .map(|r| r.ids_where(|e| e.kind == NodeKind::Mobile))
        .unwrap_or_default();
    let all: Vec<Measurement> = store
        .query(&QueryFilter::everything())
        .into_iter()
        .filter(|m| !mobile.contains(&m.node_id))
        .collect();
    let Some((first, last)) = all.first().zip(all.last()).map(|(a, b)| (a.timestamp, b.timestamp)) else {
        return Err(CliError::Data(format!("no station measurements in {}", data.display())));
    };

    let mut engine = IndexEngine::new(thermal_model(model));
    let mut values = Vec::new();
    let mut next = 0;
    let mut tick = Timestamp((first.0.div_euclid(period_s) + 1) * period_s);
    let end = Timestamp((last.0.div_euclid(period_s) + 1) * period_s);
    while tick <= end {
        while next < all.len() && all[next].timestamp < tick {
            engine.ingest(&all[next]);
            next += 1;
        }
        values.extend(engine.update(tick));
        tick = tick.offset(period_s);
    }
    write_index_files(&out.join("indexes"), &values)?;

    let mut latest: BTreeMap<(&str, &str), &IndexValue> = BTreeMap::new();
    for v in &values {
        latest.insert((v.station_id.as_str(), v.kind.code()), v);
    }
    println!("{:<8} {:<7} {:>10} {:<9} window end", "station", "index", "value", "color");
    for ((station, kind), v) in latest {
        let value = v.value.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!("{station:<8} {kind:<7} {value:>10} {:<9} {}", v.color.name(), v.window_end.to_iso8601());
    }
    Ok(())
}

fn populations(
    store: &Store,
    registry: &NodeRegistry,
    mode: CompareMode,
    radius_m: f64,
) -> Result<((String, Vec<Measurement>), (String, Vec<Measurement>)), CliError> {
    let all = store.query(&QueryFilter::everything());
    match mode {
        CompareMode::Paths => {
            let tagged = |role| {
                let ids = registry.ids_where(|e| e.kind == NodeKind::Fixed && e.path == Some(role));
                all.iter().filter(|m| ids.contains(&m.node_id)).cloned().collect::<Vec<_>>()
            };
            Ok((
                (PathRole::HeavyTraffic.name().to_string(), tagged(PathRole::HeavyTraffic)),
                (PathRole::Fitness.name().to_string(), tagged(PathRole::Fitness)),
            ))
        }
        CompareMode::MobileFixed => {
            if !(radius_m > 0.0 && radius_m.is_finite()) {
                return Err(CliError::Config(format!("--radius-m must be positive, got {radius_m}")));
            }
            let stations: Vec<Station> = registry
                .nodes
                .iter()
                .filter(|e| e.kind == NodeKind::Fixed)
                .filter_map(|e| e.position.map(|p| Station { id: e.id.clone(), position: p }))
                .collect();
            let mobile_ids = registry.ids_where(|e| e.kind == NodeKind::Mobile);
            let mobile: Vec<Measurement> = all.iter().filter(|m| mobile_ids.contains(&m.node_id)).cloned().collect();
            let assoc = associate_mobile_to_fixed(&mobile, &stations, radius_m);
            let mut picked: Vec<usize> = assoc.by_station.values().flatten().copied().collect();
            picked.sort_unstable();
            let near: Vec<Measurement> = picked.iter().map(|&i| mobile[i].clone()).collect();
            let fixed_ids: Vec<&NodeId> = assoc.by_station.keys().collect();
            let fixed: Vec<Measurement> = all.iter().filter(|m| fixed_ids.contains(&&m.node_id)).cloned().collect();
            println!(
                "associated {} of {} mobile samples with {} station(s) within {radius_m} m",
                near.len(),
                mobile.len(),
                fixed_ids.len()
            );
            Ok((("mobile".to_string(), near), ("fixed".to_string(), fixed)))
        }
    }
}

fn write_report(out: &Path, report: &ComparisonReport) -> Result<(), CliError> {
    write(&out.join("comparison.json"), &report.to_json())?;
    let pmf_dir = out.join("pmf");
    clear_dir(&pmf_dir)?;
    for row in &report.rows {
        for (label, pmf) in [(&report.population_a, &row.pmf_a), (&report.population_b, &row.pmf_b)] {
            let path: PathBuf = pmf_dir.join(format!("{}_{label}.dat", row.quantity.code()));
            write(&path, &pmf.to_plot_data())?;
        }
    }
    Ok(())
}

pub fn compare(data: &Path, mode: CompareMode, out: &Path, radius_m: f64, bins: usize) -> Result<(), CliError> {
    if bins == 0 {
        return Err(CliError::Config("--bins must be at least 1".to_string()));
    }
    let store = Store::open_existing(data)?;
    let registry = require_registry(data)?;
    let ((label_a, a), (label_b, b)) = populations(&store, &registry, mode, radius_m)?;
    let report = compare_populations(&label_a, &a, &label_b, &b, &BinningPolicy::Pooled(bins)).map_err(|e| match e {
        AnalyticsError::NoOverlap => CliError::Data(format!("{label_a} and {label_b} share no comparable quantity")),
        other => CliError::Data(other.to_string()),
    })?;
    write_report(out, &report)?;

    println!("{:<6} {:>12} {:>12} {:>8}   ({label_a} vs {label_b})", "qty", "mean_a", "mean_b", "eta");
    for r in &report.rows {
        println!("{:<6} {:>12.4} {:>12.4} {:>8.3}", r.quantity.code(), r.mean_a, r.mean_b, r.eta);
    }
    if !report.incomparable.is_empty() {
        let names: Vec<&str> = report.incomparable.iter().map(|q| q.code()).collect();
        println!("incomparable: {}", names.join(" "));
    }
    Ok(())
}

pub fn traffic(config: &Path) -> Result<(), CliError> {
    let text =
        fs::read_to_string(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let cfg: TrafficAccessConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let ti = traffic_index(&cfg).map_err(|e| match e {
        IndexError::DegenerateComposition(_) => CliError::Data(e.to_string()),
        IndexError::InvalidInput(_) => CliError::Config(e.to_string()),
    })?;
    if !cfg.access.is_empty() {
        println!("access {}", cfg.access);
    }
    println!("s_b {}", ti.s_b);
    println!("K1  {:.6}", ti.k1);
    println!("K2  {:.6}", ti.k2);
    println!("K3  {:.6}", ti.k3);
    println!("K4  {:.6}", ti.k4);
    println!("TI  {:.3} EV/s", ti.value);
    Ok(())
}

//! Station topology and hourly traffic ingestion.
//!
//! File formats (UTF-8, comma separated, header row mandatory):
//!
//! * `topology.csv`: `bs_id,lon,lat`
//! * `traffic.csv`: `bs_id,day,hour,bytes` with `day >= 1` and `hour` in `1..=24`
//!
//! Traffic is loaded into a dense [`TrafficMatrix`]; every entry gets the
//! baseline added and cells absent from the file are filled with the
//! baseline alone and counted in a [`GapReport`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};

pub const HOURS_PER_DAY: usize = 24;

/// Seconds in one traffic slot.
pub const SLOT_SECONDS: f64 = 3600.0;

/// Bytes added to every station-hour so no demand is zero.
pub const DEFAULT_BASELINE_BYTES: f64 = 500.0;

/// Spherical mean Earth radius, m.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseStation {
    pub id: u32,
    pub lon: f64,
    pub lat: f64,
}

/// Dense `station x day x hour` byte counts. Stations are kept in ascending
/// id order; days and hours are 1-based at the API.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMatrix {
    station_ids: Vec<u32>,
    days: usize,
    values: Vec<f64>,
}

impl TrafficMatrix {
    pub fn filled(mut station_ids: Vec<u32>, days: usize, value: f64) -> Self {
        station_ids.sort_unstable();
        station_ids.dedup();
        let len = station_ids.len() * days * HOURS_PER_DAY;
        TrafficMatrix {
            station_ids,
            days,
            values: vec![value; len],
        }
    }

    pub fn station_ids(&self) -> &[u32] {
        &self.station_ids
    }

    pub fn num_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn station_index(&self, id: u32) -> Option<usize> {
        self.station_ids.binary_search(&id).ok()
    }

    fn offset(&self, station: usize, day: usize, hour: usize) -> usize {
        assert!(day >= 1 && day <= self.days, "day {day} out of 1..={}", self.days);
        assert!((1..=HOURS_PER_DAY).contains(&hour), "hour {hour} out of 1..=24");
        (station * self.days + day - 1) * HOURS_PER_DAY + hour - 1
    }

    pub fn get(&self, station: usize, day: usize, hour: usize) -> f64 {
        self.values[self.offset(station, day, hour)]
    }

    pub fn set(&mut self, station: usize, day: usize, hour: usize, bytes: f64) {
        let off = self.offset(station, day, hour);
        self.values[off] = bytes;
    }

    /// One station's values for a day, hours 1..=24.
    pub fn day_profile(&self, station: usize, day: usize) -> &[f64] {
        let start = self.offset(station, day, 1);
        &self.values[start..start + HOURS_PER_DAY]
    }

    /// Every station's value at `(day, hour)`, in station order.
    pub fn slot(&self, day: usize, hour: usize) -> Vec<f64> {
        (0..self.num_stations()).map(|s| self.get(s, day, hour)).collect()
    }

    /// Sum over stations for each hour of `day`.
    pub fn hourly_totals(&self, day: usize) -> [f64; HOURS_PER_DAY] {
        let mut totals = [0.0; HOURS_PER_DAY];
        for s in 0..self.num_stations() {
            for (t, v) in totals.iter_mut().zip(self.day_profile(s, day)) {
                *t += v;
            }
        }
        totals
    }

    pub fn add_baseline(&mut self, baseline: f64) {
        self.values.iter_mut().for_each(|v| *v += baseline);
    }

    /// Keeps only the listed stations (ids not present are ignored).
    pub fn restrict_to(&self, ids: &[u32]) -> TrafficMatrix {
        let keep: Vec<u32> = ids.iter().copied().filter(|id| self.station_index(*id).is_some()).collect();
        let mut out = TrafficMatrix::filled(keep, self.days, 0.0);
        for (dst, id) in out.station_ids.clone().iter().enumerate() {
            let src = self.station_index(*id).expect("filtered above");
            let n = self.days * HOURS_PER_DAY;
            out.values[dst * n..(dst + 1) * n].copy_from_slice(&self.values[src * n..(src + 1) * n]);
        }
        out
    }
}

/// Cells the loader had to fill in, plus rows it skipped or merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapReport {
    pub missing_cells: usize,
    pub missing_by_station: BTreeMap<u32, usize>,
    pub unknown_station_rows: usize,
    pub merged_duplicate_rows: usize,
}

impl fmt::Display for GapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "missing_cells {}", self.missing_cells)?;
        writeln!(f, "unknown_station_rows {}", self.unknown_station_rows)?;
        writeln!(f, "merged_duplicate_rows {}", self.merged_duplicate_rows)?;
        for (id, n) in &self.missing_by_station {
            writeln!(f, "station {id} missing {n}")?;
        }
        Ok(())
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, source: &str, expected: &[&str]) -> Result<bool> {
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?;
    if headers.is_empty() {
        return Ok(false);
    }
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(Error::Parse {
            path: source.into(),
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), found.join(",")),
        });
    }
    Ok(true)
}

fn csv_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: source.into(),
        line,
        message: e.to_string(),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, source: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        path: source.into(),
        line,
        message: format!("missing field {name}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        path: source.into(),
        line,
        message: format!("invalid {name}: {raw:?}"),
    })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn read_topology<R: Read>(reader: R, source: &str) -> Result<Vec<BaseStation>> {
    let mut rdr = csv_reader(reader);
    if !check_header(&mut rdr, source, &["bs_id", "lon", "lat"])? {
        return Ok(Vec::new());
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let station = BaseStation {
            id: field(&rec, 0, "bs_id", source)?,
            lon: field(&rec, 1, "lon", source)?,
            lat: field(&rec, 2, "lat", source)?,
        };
        if !station.lon.is_finite() || !station.lat.is_finite() {
            return Err(Error::validation(format!("station {}: non-finite coordinate", station.id)));
        }
        if !seen.insert(station.id) {
            return Err(Error::validation(format!("duplicate station id {}", station.id)));
        }
        out.push(station);
    }
    Ok(out)
}

pub fn load_topology(path: &Path) -> Result<Vec<BaseStation>> {
    read_topology(open(path)?, &path.display().to_string())
}

pub fn write_topology<W: Write>(writer: W, stations: &[BaseStation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("topology", std::io::Error::other(e));
    w.write_record(["bs_id", "lon", "lat"]).map_err(io)?;
    for s in stations {
        w.write_record([s.id.to_string(), s.lon.to_string(), s.lat.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("topology", e))
}

pub fn save_topology(path: &Path, stations: &[BaseStation]) -> Result<()> {
    write_topology(create(path)?, stations).map_err(|e| relabel_io(e, path))
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Reads `bs_id,day,hour,bytes` rows. With `stations` given, the matrix
/// covers exactly those ids (rows for other ids are counted and skipped);
/// otherwise it covers every id present. Repeated `(id, day, hour)` rows are
/// summed.
pub fn read_traffic<R: Read>(
    reader: R,
    source: &str,
    baseline: f64,
    stations: Option<&[u32]>,
) -> Result<(TrafficMatrix, GapReport)> {
    if !(baseline >= 0.0) {
        return Err(Error::validation(format!("baseline must be >= 0, got {baseline}")));
    }
    let mut rdr = csv_reader(reader);
    let mut rows: BTreeMap<(u32, usize, usize), f64> = BTreeMap::new();
    let mut report = GapReport::default();
    let known: Option<BTreeSet<u32>> = stations.map(|s| s.iter().copied().collect());

    if check_header(&mut rdr, source, &["bs_id", "day", "hour", "bytes"])? {
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(source, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let id: u32 = field(&rec, 0, "bs_id", source)?;
            let day: usize = field(&rec, 1, "day", source)?;
            let hour: usize = field(&rec, 2, "hour", source)?;
            let bytes: f64 = field(&rec, 3, "bytes", source)?;
            if day == 0 || !(1..=HOURS_PER_DAY).contains(&hour) {
                return Err(Error::Parse {
                    path: source.into(),
                    line,
                    message: format!("day must be >= 1 and hour in 1..=24, got day {day} hour {hour}"),
                });
            }
            if !(bytes >= 0.0) || !bytes.is_finite() {
                return Err(Error::validation(format!(
                    "{source}: line {line}: bytes must be a nonnegative number, got {bytes}"
                )));
            }
            if known.as_ref().is_some_and(|k| !k.contains(&id)) {
                report.unknown_station_rows += 1;
                continue;
            }
            match rows.entry((id, day, hour)) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(bytes);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    *e.get_mut() += bytes;
                    report.merged_duplicate_rows += 1;
                }
            }
        }
    }

    let ids: Vec<u32> = match stations {
        Some(s) => s.to_vec(),
        None => rows.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let days = rows.keys().map(|k| k.1).max().unwrap_or(0);
    let mut matrix = TrafficMatrix::filled(ids, days, f64::NAN);
    for (&(id, day, hour), &bytes) in &rows {
        let s = matrix.station_index(id).expect("ids collected from rows");
        matrix.set(s, day, hour, bytes);
    }
    for s in 0..matrix.num_stations() {
        let id = matrix.station_ids[s];
        for day in 1..=days {
            for hour in 1..=HOURS_PER_DAY {
                if matrix.get(s, day, hour).is_nan() {
                    matrix.set(s, day, hour, 0.0);
                    report.missing_cells += 1;
                    *report.missing_by_station.entry(id).or_insert(0) += 1;
                }
            }
        }
    }
    matrix.add_baseline(baseline);
    Ok((matrix, report))
}

pub fn load_traffic(path: &Path, baseline: f64) -> Result<(TrafficMatrix, GapReport)> {
    read_traffic(open(path)?, &path.display().to_string(), baseline, None)
}

/// Like [`load_traffic`] but shaped to the given stations.
pub fn load_traffic_for(
    path: &Path,
    baseline: f64,
    stations: &[BaseStation],
) -> Result<(TrafficMatrix, GapReport)> {
    let ids: Vec<u32> = stations.iter().map(|s| s.id).collect();
    read_traffic(open(path)?, &path.display().to_string(), baseline, Some(&ids))
}

pub fn write_traffic<W: Write>(writer: W, matrix: &TrafficMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("traffic", std::io::Error::other(e));
    w.write_record(["bs_id", "day", "hour", "bytes"]).map_err(io)?;
    for (s, id) in matrix.station_ids.iter().enumerate() {
        for day in 1..=matrix.days {
            for hour in 1..=HOURS_PER_DAY {
                w.write_record([
                    id.to_string(),
                    day.to_string(),
                    hour.to_string(),
                    matrix.get(s, day, hour).to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("traffic", e))
}

pub fn save_traffic(path: &Path, matrix: &TrafficMatrix) -> Result<()> {
    write_traffic(create(path)?, matrix).map_err(|e| relabel_io(e, path))
}

/// Bins raw `bs_id,timestamp,bytes` records (timestamp in seconds) into the
/// `bs_id,day,hour,bytes` layout, counting days from `start_timestamp`.
pub fn convert_raw_records<R: Read, W: Write>(reader: R, writer: W, start_timestamp: i64) -> Result<usize> {
    let source = "raw records";
    let mut rdr = csv_reader(reader);
    let mut bins: BTreeMap<(u32, usize, usize), f64> = BTreeMap::new();
    if check_header(&mut rdr, source, &["bs_id", "timestamp", "bytes"])? {
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(source, e))?;
            let id: u32 = field(&rec, 0, "bs_id", source)?;
            let ts: i64 = field(&rec, 1, "timestamp", source)?;
            let bytes: f64 = field(&rec, 2, "bytes", source)?;
            let offset = ts - start_timestamp;
            if offset < 0 {
                return Err(Error::validation(format!("timestamp {ts} precedes start {start_timestamp}")));
            }
            let day = (offset / 86_400) as usize + 1;
            let hour = ((offset % 86_400) / 3_600) as usize + 1;
            *bins.entry((id, day, hour)).or_insert(0.0) += bytes;
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("converted traffic", std::io::Error::other(e));
    w.write_record(["bs_id", "day", "hour", "bytes"]).map_err(io)?;
    for (&(id, day, hour), bytes) in &bins {
        w.write_record([id.to_string(), day.to_string(), hour.to_string(), bytes.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("converted traffic", e))?;
    Ok(bins.len())
}

/// Axis-aligned lon/lat rectangle, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Bounds {
    /// The limited-area window used for the small-area runs.
    pub const LIMITED_AREA: Bounds = Bounds {
        min_lon: 111.055,
        min_lat: 13.03,
        max_lon: 111.07,
        max_lat: 13.05,
    };

    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self> {
        if !(min_lon <= max_lon && min_lat <= max_lat) {
            return Err(Error::validation("bounds minimum exceeds maximum"));
        }
        Ok(Bounds {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        })
    }

    /// Parses `lon1,lat1,lon2,lat2`; corner order does not matter.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::validation(format!("invalid bounds {text:?}")))?;
        let [lon1, lat1, lon2, lat2] = parts[..] else {
            return Err(Error::validation(format!("bounds need 4 numbers, got {text:?}")));
        };
        Bounds::new(lon1.min(lon2), lat1.min(lat2), lon1.max(lon2), lat1.max(lat2))
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon <= self.max_lon && lat >= self.min_lat && lat <= self.max_lat
    }
}

pub fn filter_area(stations: &[BaseStation], bounds: &Bounds) -> Vec<BaseStation> {
    stations
        .iter()
        .filter(|s| bounds.contains(s.lon, s.lat))
        .copied()
        .collect()
}

/// Local equirectangular projection to meters east / north of a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub ref_lon: f64,
    pub ref_lat: f64,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

impl Projection {
    pub fn new(ref_lon: f64, ref_lat: f64) -> Self {
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Projection {
            ref_lon,
            ref_lat,
            meters_per_deg_lat,
            meters_per_deg_lon: meters_per_deg_lat * ref_lat.to_radians().cos(),
        }
    }

    /// Centered on the mean station position.
    pub fn centered_on(stations: &[BaseStation]) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::domain("cannot project an empty station set"));
        }
        let n = stations.len() as f64;
        let lon = stations.iter().map(|s| s.lon).sum::<f64>() / n;
        let lat = stations.iter().map(|s| s.lat).sum::<f64>() / n;
        Ok(Projection::new(lon, lat))
    }

    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.ref_lon) * self.meters_per_deg_lon,
            (lat - self.ref_lat) * self.meters_per_deg_lat,
        )
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.ref_lon + x / self.meters_per_deg_lon,
            self.ref_lat + y / self.meters_per_deg_lat,
        )
    }
}

pub fn project_to_meters(stations: &[BaseStation], projection: &Projection) -> Vec<(f64, f64)> {
    stations.iter().map(|s| projection.forward(s.lon, s.lat)).collect()
}

/// Knobs of the synthetic scenario generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub components: usize,
    pub stations: usize,
    pub days: usize,
    /// Relative Gaussian noise on each hourly value; 0 gives exactly
    /// day-periodic traffic.
    pub noise: f64,
    pub center_lon: f64,
    pub center_lat: f64,
    /// Half-width of the square the component means are drawn from, degrees.
    pub half_width_deg: f64,
    /// Standard deviation of each component, degrees.
    pub component_std_deg: f64,
    /// Median peak-hour bytes of a station.
    pub peak_bytes: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            components: 8,
            stations: 200,
            days: 8,
            noise: 0.1,
            center_lon: 111.0625,
            center_lat: 13.04,
            half_width_deg: 0.025,
            component_std_deg: 0.0015,
            peak_bytes: 2e7,
        }
    }
}

/// A generated scenario with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub stations: Vec<BaseStation>,
    pub traffic: TrafficMatrix,
    /// Generating component of each station, in station order.
    pub truth_labels: Vec<usize>,
    /// Component means, (lon, lat).
    pub truth_means: Vec<(f64, f64)>,
}

/// Relative hourly load shape with a late-morning and an evening peak.
pub fn daily_profile() -> [f64; HOURS_PER_DAY] {
    let mut p = [0.0; HOURS_PER_DAY];
    for (h, v) in p.iter_mut().enumerate() {
        let t = h as f64 + 0.5;
        *v = 0.25 + 0.5 * (-((t - 11.0) / 3.0).powi(2)).exp() + 0.75 * (-((t - 20.0) / 2.5).powi(2)).exp();
    }
    p
}

pub fn synth_scenario(cfg: &SynthConfig) -> Result<Scenario> {
    if cfg.components == 0 || cfg.stations < cfg.components || cfg.days == 0 {
        return Err(Error::domain(
            "synthetic scenario needs components >= 1, stations >= components and days >= 1",
        ));
    }
    if !(cfg.noise >= 0.0) || !(cfg.half_width_deg > 0.0) || !(cfg.component_std_deg > 0.0) || !(cfg.peak_bytes > 0.0) {
        return Err(Error::domain("synthetic scenario scales must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Component means, kept at least 6 standard deviations apart when the
    // box allows it.
    let min_sep = 6.0 * cfg.component_std_deg;
    let mut means: Vec<(f64, f64)> = Vec::with_capacity(cfg.components);
    let mut attempts = 0;
    while means.len() < cfg.components {
        let lon = cfg.center_lon + rng.random_range(-cfg.half_width_deg..=cfg.half_width_deg);
        let lat = cfg.center_lat + rng.random_range(-cfg.half_width_deg..=cfg.half_width_deg);
        attempts += 1;
        let clear = means
            .iter()
            .all(|m| ((m.0 - lon).powi(2) + (m.1 - lat).powi(2)).sqrt() >= min_sep);
        if clear || attempts > 10_000 {
            means.push((lon, lat));
        }
    }

    let spread = Normal::new(0.0, cfg.component_std_deg).expect("positive std");
    let scale = LogNormal::new(cfg.peak_bytes.ln(), 0.5).expect("finite parameters");
    let hotspot: Vec<f64> = (0..cfg.components).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut stations = Vec::with_capacity(cfg.stations);
    let mut truth_labels = Vec::with_capacity(cfg.stations);
    let mut station_scale = Vec::with_capacity(cfg.stations);
    for n in 0..cfg.stations {
        // Every component gets at least one station.
        let k = if n < cfg.components { n } else { rng.random_range(0..cfg.components) };
        let (mlon, mlat) = means[k];
        stations.push(BaseStation {
            id: n as u32 + 1,
            lon: mlon + spread.sample(&mut rng),
            lat: mlat + spread.sample(&mut rng),
        });
        truth_labels.push(k);
        station_scale.push(scale.sample(&mut rng) * hotspot[k]);
    }

    let profile = daily_profile();
    let peak = profile.iter().cloned().fold(f64::MIN, f64::max);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let ids = stations.iter().map(|s| s.id).collect();
    let mut traffic = TrafficMatrix::filled(ids, cfg.days, 0.0);
    for (s, &base) in station_scale.iter().enumerate() {
        for day in 1..=cfg.days {
            for hour in 1..=HOURS_PER_DAY {
                let shape = base * profile[hour - 1] / peak;
                let factor = if cfg.noise > 0.0 {
                    (1.0 + cfg.noise * noise.sample(&mut rng)).max(0.0)
                } else {
                    1.0
                };
                traffic.set(s, day, hour, (shape * factor).round());
            }
        }
    }

    Ok(Scenario {
        stations,
        traffic,
        truth_labels,
        truth_means: means,
    })
}

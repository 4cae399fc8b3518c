//! Domain records and CSV ingestion for the four input sources.
//!
//! Timestamps are integer seconds since the Unix epoch (UTC). The `time`
//! column accepts ISO-8601 (`2019-09-01T14:03:00Z`) or integer
//! milliseconds since the epoch, which is what the Waze feed exports.
//! Output is always ISO-8601.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

pub const REPORT_HEADER: [&str; 5] = ["id", "time", "lat", "lon", "reliability"];
pub const INCIDENT_HEADER: [&str; 4] = ["id", "time", "lat", "lon"];
pub const TRAFFIC_HEADER: [&str; 6] = ["segment_id", "time", "speed", "reference_speed", "lat", "lon"];
pub const WEATHER_HEADER: [&str; 5] = ["station_id", "time", "precipitation", "lat", "lon"];

pub fn parse_time(s: &str) -> std::result::Result<Timestamp, String> {
    let s = s.trim();
    if !s.is_empty() && s.bytes().enumerate().all(|(i, b)| b.is_ascii_digit() || (i == 0 && b == b'-')) {
        let ms: i64 = s.parse().map_err(|e| format!("bad epoch milliseconds: {e}"))?;
        return Ok(ms.div_euclid(1000));
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp())
        .map_err(|e| format!("expected ISO-8601 UTC timestamp, got {s:?} ({e})"))
}

pub fn format_time(t: Timestamp) -> String {
    match Utc.timestamp_opt(t, 0).single() {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => t.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        BoundingBox { lat_min, lat_max, lon_min, lon_max }
    }

    /// Box spanning `east_km` by `north_km` from a south-west corner, using the
    /// same tangent-plane projection as the grid.
    pub fn from_origin_km(lat: f64, lon: f64, east_km: f64, north_km: f64) -> Self {
        let (lat_max, lon_max) = crate::grid::unproject(lat, lon, east_km, north_km);
        BoundingBox { lat_min: lat, lat_max, lon_min: lon, lon_max }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max].iter().all(|v| v.is_finite());
        if !finite || !valid_coordinate(self.lat_min, self.lon_min) || !valid_coordinate(self.lat_max, self.lon_max) {
            return Err(Error::Argument(format!("region {self:?} has invalid coordinates")));
        }
        if self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::Argument(format!("region {self:?} is degenerate")));
        }
        Ok(())
    }
}

pub fn valid_coordinate(lat: f64, lon: f64) -> bool {
    (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub time: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub reliability: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    /// Officially reported time, used as the occurrence time.
    pub time: Timestamp,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficObservation {
    pub segment_id: String,
    pub time: Timestamp,
    /// km/h
    pub speed: f64,
    /// Free-flow speed, km/h.
    pub reference_speed: f64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherObservation {
    pub station_id: String,
    pub time: Timestamp,
    /// mm
    pub precipitation: f64,
    pub lat: f64,
    pub lon: f64,
}

trait Timed {
    fn time(&self) -> Timestamp;
}

macro_rules! impl_timed {
    ($($t:ty),*) => {$(
        impl Timed for $t {
            fn time(&self) -> Timestamp {
                self.time
            }
        }
    )*};
}
impl_timed!(Report, Incident, TrafficObservation, WeatherObservation);

/// Validated, time-sorted input data. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub reports: Vec<Report>,
    pub incidents: Vec<Incident>,
    pub traffic: Vec<TrafficObservation>,
    pub weather: Vec<WeatherObservation>,
    pub region: BoundingBox,
}

impl Dataset {
    pub fn empty(region: BoundingBox) -> Self {
        Dataset { reports: Vec::new(), incidents: Vec::new(), traffic: Vec::new(), weather: Vec::new(), region }
    }

    /// Builds a dataset from in-memory records, applying the same sorting as
    /// file ingestion. Records are not re-validated.
    pub fn from_records(
        region: BoundingBox,
        mut reports: Vec<Report>,
        mut incidents: Vec<Incident>,
        mut traffic: Vec<TrafficObservation>,
        mut weather: Vec<WeatherObservation>,
    ) -> Self {
        reports.sort_by_key(|r| r.time);
        incidents.sort_by_key(|r| r.time);
        traffic.sort_by_key(|r| r.time);
        weather.sort_by_key(|r| r.time);
        Dataset { reports, incidents, traffic, weather, region }
    }

    /// Earliest and latest timestamps over all sources.
    pub fn time_span(&self) -> Option<(Timestamp, Timestamp)> {
        let firsts = [
            self.reports.first().map(|r| r.time),
            self.incidents.first().map(|r| r.time),
            self.traffic.first().map(|r| r.time),
            self.weather.first().map(|r| r.time),
        ];
        let lasts = [
            self.reports.last().map(|r| r.time),
            self.incidents.last().map(|r| r.time),
            self.traffic.last().map(|r| r.time),
            self.weather.last().map(|r| r.time),
        ];
        let lo = firsts.iter().flatten().min()?;
        let hi = lasts.iter().flatten().max()?;
        Some((*lo, *hi))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub rows: usize,
    pub kept: usize,
    pub duplicates: usize,
    pub invalid_coordinates: usize,
    pub out_of_region: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub reports: SourceSummary,
    pub incidents: SourceSummary,
    pub traffic: SourceSummary,
    pub weather: SourceSummary,
}

/// File locations for each source. Traffic and weather are optional covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub reports: PathBuf,
    pub incidents: PathBuf,
    pub traffic: Option<PathBuf>,
    pub weather: Option<PathBuf>,
}

impl DataPaths {
    /// Standard file names inside a data directory; covariate files are used when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        DataPaths {
            reports: dir.join("reports.csv"),
            incidents: dir.join("incidents.csv"),
            traffic: opt("traffic.csv"),
            weather: opt("weather.csv"),
        }
    }
}

struct RowReader<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
    header: &'a [&'a str],
}

impl RowReader<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, field: &str) -> Result<&str> {
        let idx = self.header.iter().position(|h| *h == field).expect("known field");
        self.record.get(idx).map(str::trim).ok_or_else(|| self.err(field, "missing value"))
    }

    fn string(&self, field: &str) -> Result<String> {
        let v = self.raw(field)?;
        if v.is_empty() {
            return Err(self.err(field, "empty value"));
        }
        Ok(v.to_string())
    }

    fn time(&self, field: &str) -> Result<Timestamp> {
        parse_time(self.raw(field)?).map_err(|m| self.err(field, m))
    }

    fn real(&self, field: &str) -> Result<f64> {
        let raw = self.raw(field)?;
        let v: f64 = raw.parse().map_err(|_| self.err(field, format!("not a number: {raw:?}")))?;
        if !v.is_finite() {
            return Err(self.err(field, "not finite"));
        }
        Ok(v)
    }
}

fn read_rows<T>(path: &Path, header: &[&str], mut parse: impl FnMut(&RowReader<'_>) -> Result<T>) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let found: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found.len() != header.len() || found.iter().zip(header).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            field: "header".into(),
            message: format!("expected `{}`, found `{}`", header.join(","), found.join(",")),
        });
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line,
                    field: "row".into(),
                    message: e.to_string(),
                });
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = RowReader { path, line, record: &record, header };
        out.push(parse(&row)?);
    }
    Ok(out)
}

/// Drops invalid/out-of-region rows, stably sorts by time, and removes
/// duplicate keys keeping the earliest record (file order breaks ties).
fn clean<T: Timed>(
    rows: Vec<T>,
    region: &BoundingBox,
    coords: impl Fn(&T) -> (f64, f64),
    key: impl Fn(&T) -> String,
    summary: &mut SourceSummary,
) -> Vec<T> {
    summary.rows = rows.len();
    let mut kept: Vec<T> = Vec::with_capacity(rows.len());
    for row in rows {
        let (lat, lon) = coords(&row);
        if !valid_coordinate(lat, lon) {
            summary.invalid_coordinates += 1;
        } else if !region.contains(lat, lon) {
            summary.out_of_region += 1;
        } else {
            kept.push(row);
        }
    }
    kept.sort_by_key(|r| r.time());
    let mut seen = std::collections::HashSet::with_capacity(kept.len());
    kept.retain(|r| seen.insert(key(r)));
    summary.duplicates = summary.rows - summary.invalid_coordinates - summary.out_of_region - kept.len();
    summary.kept = kept.len();
    kept
}

pub fn read_reports(path: &Path) -> Result<Vec<Report>> {
    read_rows(path, &REPORT_HEADER, |row| {
        let raw = row.raw("reliability")?;
        let reliability: i64 = raw.parse().map_err(|_| row.err("reliability", format!("not an integer: {raw:?}")))?;
        if !(1..=10).contains(&reliability) {
            return Err(row.err("reliability", format!("{reliability} outside [1, 10]")));
        }
        Ok(Report {
            id: row.string("id")?,
            time: row.time("time")?,
            lat: row.real("lat")?,
            lon: row.real("lon")?,
            reliability: reliability as u8,
        })
    })
}

pub fn read_incidents(path: &Path) -> Result<Vec<Incident>> {
    read_rows(path, &INCIDENT_HEADER, |row| {
        Ok(Incident { id: row.string("id")?, time: row.time("time")?, lat: row.real("lat")?, lon: row.real("lon")? })
    })
}

pub fn read_traffic(path: &Path) -> Result<Vec<TrafficObservation>> {
    read_rows(path, &TRAFFIC_HEADER, |row| {
        let speed = row.real("speed")?;
        if speed < 0.0 {
            return Err(row.err("speed", "negative speed"));
        }
        let reference_speed = row.real("reference_speed")?;
        if reference_speed <= 0.0 {
            return Err(row.err("reference_speed", "must be positive"));
        }
        Ok(TrafficObservation {
            segment_id: row.string("segment_id")?,
            time: row.time("time")?,
            speed,
            reference_speed,
            lat: row.real("lat")?,
            lon: row.real("lon")?,
        })
    })
}

pub fn read_weather(path: &Path) -> Result<Vec<WeatherObservation>> {
    read_rows(path, &WEATHER_HEADER, |row| {
        let precipitation = row.real("precipitation")?;
        if precipitation < 0.0 {
            return Err(row.err("precipitation", "negative precipitation"));
        }
        Ok(WeatherObservation {
            station_id: row.string("station_id")?,
            time: row.time("time")?,
            precipitation,
            lat: row.real("lat")?,
            lon: row.real("lon")?,
        })
    })
}

/// Loads, validates, sorts, and de-duplicates all sources.
pub fn load_dataset(paths: &DataPaths, region: BoundingBox) -> Result<(Dataset, LoadSummary)> {
    region.validate()?;
    let mut summary = LoadSummary::default();
    let reports =
        clean(read_reports(&paths.reports)?, &region, |r| (r.lat, r.lon), |r| r.id.clone(), &mut summary.reports);
    let incidents =
        clean(read_incidents(&paths.incidents)?, &region, |r| (r.lat, r.lon), |r| r.id.clone(), &mut summary.incidents);
    let traffic = match &paths.traffic {
        Some(p) => clean(
            read_traffic(p)?,
            &region,
            |r| (r.lat, r.lon),
            |r| format!("{}\u{0}{}", r.segment_id, r.time),
            &mut summary.traffic,
        ),
        None => Vec::new(),
    };
    let weather = match &paths.weather {
        Some(p) => clean(
            read_weather(p)?,
            &region,
            |r| (r.lat, r.lon),
            |r| format!("{}\u{0}{}", r.station_id, r.time),
            &mut summary.weather,
        ),
        None => Vec::new(),
    };
    for (name, s) in [
        ("reports", &summary.reports),
        ("incidents", &summary.incidents),
        ("traffic", &summary.traffic),
        ("weather", &summary.weather),
    ] {
        if s.invalid_coordinates + s.out_of_region + s.duplicates > 0 {
            log::info!(
                "{name}: dropped {} invalid-coordinate, {} out-of-region, {} duplicate rows",
                s.invalid_coordinates,
                s.out_of_region,
                s.duplicates
            );
        }
    }
    Ok((Dataset { reports, incidents, traffic, weather, region }, summary))
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the dataset as the four standard CSV files in `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DataPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DataPaths {
        reports: dir.join("reports.csv"),
        incidents: dir.join("incidents.csv"),
        traffic: Some(dir.join("traffic.csv")),
        weather: Some(dir.join("weather.csv")),
    };
    write_csv(
        &paths.reports,
        &REPORT_HEADER,
        ds.reports.iter().map(|r| {
            vec![r.id.clone(), format_time(r.time), r.lat.to_string(), r.lon.to_string(), r.reliability.to_string()]
        }),
    )?;
    write_csv(
        &paths.incidents,
        &INCIDENT_HEADER,
        ds.incidents.iter().map(|r| vec![r.id.clone(), format_time(r.time), r.lat.to_string(), r.lon.to_string()]),
    )?;
    write_csv(
        paths.traffic.as_ref().unwrap(),
        &TRAFFIC_HEADER,
        ds.traffic.iter().map(|r| {
            vec![
                r.segment_id.clone(),
                format_time(r.time),
                r.speed.to_string(),
                r.reference_speed.to_string(),
                r.lat.to_string(),
                r.lon.to_string(),
            ]
        }),
    )?;
    write_csv(
        paths.weather.as_ref().unwrap(),
        &WEATHER_HEADER,
        ds.weather.iter().map(|r| {
            vec![
                r.station_id.clone(),
                format_time(r.time),
                r.precipitation.to_string(),
                r.lat.to_string(),
                r.lon.to_string(),
            ]
        }),
    )?;
    let region_path = dir.join("region.json");
    let mut f = File::create(&region_path).map_err(|e| Error::io(&region_path, e))?;
    serde_json::to_writer_pretty(&mut f, &ds.region)?;
    f.write_all(b"\n").map_err(|e| Error::io(&region_path, e))?;
    Ok(paths)
}

/// Reads `region.json` written next to a dataset, if present.
pub fn read_region(dir: &Path) -> Result<Option<BoundingBox>> {
    let p = dir.join("region.json");
    if !p.exists() {
        return Ok(None);
    }
    let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_reader(f)?))
}

fn slice_by_time<T: Timed + Clone>(rows: &[T], start: Timestamp, end: Timestamp) -> Vec<T> {
    let lo = rows.partition_point(|r| r.time() < start);
    let hi = rows.partition_point(|r| r.time() < end);
    rows[lo..hi].to_vec()
}

/// Keeps records with `time` in `[start, end)`.
pub fn filter_time(ds: &Dataset, start: Timestamp, end: Timestamp) -> Result<Dataset> {
    if start >= end {
        return Err(Error::Argument(format!("empty time window: start {start} >= end {end}")));
    }
    Ok(Dataset {
        reports: slice_by_time(&ds.reports, start, end),
        incidents: slice_by_time(&ds.incidents, start, end),
        traffic: slice_by_time(&ds.traffic, start, end),
        weather: slice_by_time(&ds.weather, start, end),
        region: ds.region,
    })
}

/// A half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeRange {
    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t < self.end
    }
}

/// One train/test split: the test block is one period, training is every other period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub index: usize,
    pub test: TimeRange,
    pub train: Vec<TimeRange>,
}

impl Rotation {
    pub fn in_train(&self, t: Timestamp) -> bool {
        self.train.iter().any(|r| r.contains(t))
    }
}

/// Calendar-month blocks covering `[start, end)`; the first and last blocks
/// are clipped to the interval.
pub fn month_blocks(start: Timestamp, end: Timestamp) -> Result<Vec<TimeRange>> {
    if start >= end {
        return Err(Error::Argument(format!("empty time window: start {start} >= end {end}")));
    }
    let first = Utc
        .timestamp_opt(start, 0)
        .single()
        .ok_or_else(|| Error::Argument(format!("timestamp {start} out of range")))?;
    let (mut y, mut m) = (first.year(), first.month());
    let mut blocks = Vec::new();
    let mut lo = start;
    while lo < end {
        let (ny, nm) = if m == 12 { (y + 1, 1) } else { (y, m + 1) };
        let next = NaiveDate::from_ymd_opt(ny, nm, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|d| d.and_utc().timestamp())
            .ok_or_else(|| Error::Argument("calendar overflow".into()))?;
        let hi = next.min(end);
        blocks.push(TimeRange { start: lo, end: hi });
        lo = hi;
        (y, m) = (ny, nm);
    }
    Ok(blocks)
}

/// Leave-one-block-out rotations: each block serves once as the test set.
pub fn rotations(blocks: &[TimeRange]) -> Vec<Rotation> {
    (0..blocks.len())
        .map(|i| Rotation {
            index: i,
            test: blocks[i],
            train: blocks.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| *b).collect(),
        })
        .collect()
}

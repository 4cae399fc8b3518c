//! Seeded synthetic scenarios with known ground truth.
//!
//! Incidents follow a homogeneous Poisson process in time and a Gaussian
//! mixture in space. Each incident triggers a Poisson number of crowdsourced
//! reports that lag the occurrence (exponential delay) and drift from it
//! (isotropic Gaussian displacement); the official report lags by its own
//! exponential delay. False reports are uniform over the region and period.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`, so identical configurations produce identical files
//! on every platform.

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{self, BoundingBox, Dataset, Incident, Report, Timestamp, TrafficObservation, WeatherObservation};
use crate::error::{Error, Result};
use crate::grid::{geodesic_km, project, unproject};

const SECS_PER_DAY: f64 = 86_400.0;
/// Free-flow speed of every synthetic segment, km/h.
pub const REFERENCE_SPEED: f64 = 60.0;
/// Radius around an incident within which segments slow down, km.
pub const CONGESTION_RADIUS_KM: f64 = 1.0;
/// How long a slowdown lasts, seconds.
pub const CONGESTION_SECS: i64 = 30 * 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub lat: f64,
    pub lon: f64,
    pub weight: f64,
    pub sigma_km: f64,
}

/// Hourly AR(1) precipitation: a shared latent series `x' = φ·x + σ·ε`, observed
/// at each station as `max(0, x + offset + station_noise·ε)` mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecipProcess {
    pub phi: f64,
    pub sigma: f64,
    pub offset: f64,
    pub station_noise: f64,
    pub stations: usize,
    pub step_min: u32,
}

impl Default for PrecipProcess {
    fn default() -> Self {
        PrecipProcess { phi: 0.95, sigma: 0.4, offset: -0.6, station_noise: 0.1, stations: 4, step_min: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// ISO-8601 start of the simulated period.
    pub start: String,
    pub duration_days: f64,
    pub region: BoundingBox,
    pub hotspots: Vec<Hotspot>,
    /// Incidents per day.
    pub incident_rate: f64,
    /// Expected genuine reports per incident.
    pub report_rate_mean: f64,
    pub report_spatial_sigma_km: f64,
    pub report_delay_mean_min: f64,
    pub official_delay_mean_min: f64,
    /// False reports per day.
    pub false_report_rate: f64,
    /// Probabilities of reliability 1..=10 for genuine reports.
    pub reliability_true: Vec<f64>,
    /// Probabilities of reliability 1..=10 for false reports.
    pub reliability_false: Vec<f64>,
    /// Fractional speed drop near incidents.
    pub congestion_bump: f64,
    /// Unrelated slowdowns per day, each at a random segment.
    pub background_congestion_rate: f64,
    /// Spacing of the synthetic road-segment lattice, km.
    pub segment_spacing_km: f64,
    pub precip: PrecipProcess,
}

const ORIGIN: (f64, f64) = (36.05, -86.95);
const SIDE_KM: f64 = 20.0;

impl Default for ScenarioConfig {
    fn default() -> Self {
        let spot = |e: f64, n: f64, weight: f64, sigma_km: f64| {
            let (lat, lon) = unproject(ORIGIN.0, ORIGIN.1, e, n);
            Hotspot { lat, lon, weight, sigma_km }
        };
        ScenarioConfig {
            seed: 42,
            start: "2019-09-01T00:00:00Z".into(),
            duration_days: 122.0,
            region: BoundingBox::from_origin_km(ORIGIN.0, ORIGIN.1, SIDE_KM, SIDE_KM),
            hotspots: vec![
                spot(6.0, 6.0, 0.3, 1.5),
                spot(14.0, 7.0, 0.25, 2.0),
                spot(8.0, 15.0, 0.2, 1.5),
                spot(15.5, 15.5, 0.1, 1.0),
                spot(10.0, 10.0, 0.15, 6.0),
            ],
            incident_rate: 6.0,
            report_rate_mean: 4.0,
            report_spatial_sigma_km: 0.5,
            report_delay_mean_min: 5.0,
            official_delay_mean_min: 12.0,
            false_report_rate: 40.0,
            reliability_true: vec![0.01, 0.02, 0.03, 0.04, 0.06, 0.09, 0.15, 0.2, 0.2, 0.2],
            reliability_false: vec![0.2, 0.2, 0.17, 0.13, 0.1, 0.08, 0.06, 0.03, 0.02, 0.01],
            congestion_bump: 0.3,
            background_congestion_rate: 10.0,
            segment_spacing_km: 1.0,
            precip: PrecipProcess::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn start_time(&self) -> Result<Timestamp> {
        data::parse_time(&self.start).map_err(|m| Error::config("synth", format!("start: {m}")))
    }

    pub fn end_time(&self) -> Result<Timestamp> {
        Ok(self.start_time()? + (self.duration_days * SECS_PER_DAY).round() as i64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config("synth", format!("{field}: {msg}")));
        self.start_time()?;
        if !(self.duration_days > 0.0 && self.duration_days.is_finite()) {
            return bad("duration_days", format!("must be positive, got {}", self.duration_days));
        }
        self.region.validate().map_err(|e| Error::config("synth", format!("region: {e}")))?;
        for (name, v) in [
            ("incident_rate", self.incident_rate),
            ("report_rate_mean", self.report_rate_mean),
            ("false_report_rate", self.false_report_rate),
            ("background_congestion_rate", self.background_congestion_rate),
            ("report_delay_mean_min", self.report_delay_mean_min),
            ("official_delay_mean_min", self.official_delay_mean_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be a finite value >= 0, got {v}"));
            }
        }
        for (name, v) in
            [("report_spatial_sigma_km", self.report_spatial_sigma_km), ("segment_spacing_km", self.segment_spacing_km)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.congestion_bump) {
            return bad("congestion_bump", format!("must lie in [0, 1), got {}", self.congestion_bump));
        }
        for (name, dist) in
            [("reliability_true", &self.reliability_true), ("reliability_false", &self.reliability_false)]
        {
            if dist.len() != 10 || dist.iter().any(|p| !(*p >= 0.0)) {
                return bad(name, "needs 10 non-negative probabilities".into());
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(name, format!("probabilities sum to {sum}, not 1"));
            }
        }
        if self.incident_rate > 0.0 {
            if self.hotspots.is_empty() {
                return bad("hotspots", "at least one hotspot is required when incident_rate > 0".into());
            }
            for h in &self.hotspots {
                if !(h.weight >= 0.0 && h.sigma_km > 0.0) {
                    return bad("hotspots", format!("weight must be >= 0 and sigma_km > 0 in {h:?}"));
                }
            }
            if self.hotspots.iter().map(|h| h.weight).sum::<f64>() <= 0.0 {
                return bad("hotspots", "weights sum to zero".into());
            }
        }
        let p = &self.precip;
        if !(p.phi.abs() < 1.0 && p.sigma >= 0.0 && p.station_noise >= 0.0 && p.step_min > 0) {
            return bad("precip", format!("need |phi| < 1, sigma >= 0, station_noise >= 0, step_min > 0; got {p:?}"));
        }
        Ok(())
    }
}

/// Which incident produced each report; `None` marks a false report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub report_id: String,
    pub incident_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dataset: Dataset,
    pub provenance: Vec<Provenance>,
    /// True occurrence times, parallel to `dataset.incidents`.
    pub occurrence_times: Vec<Timestamp>,
}

struct Sampler<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
    side: (f64, f64),
}

impl Sampler<'_> {
    fn in_region_km(&self, e: f64, n: f64) -> bool {
        e >= 0.0 && n >= 0.0 && e <= self.side.0 && n <= self.side.1
    }

    fn to_latlon(&self, e: f64, n: f64) -> (f64, f64) {
        unproject(self.cfg.region.lat_min, self.cfg.region.lon_min, e, n)
    }

    fn uniform_point(&mut self) -> (f64, f64) {
        let e = self.rng.random::<f64>() * self.side.0;
        let n = self.rng.random::<f64>() * self.side.1;
        (e, n)
    }

    fn gaussian_offset(&mut self, sigma: f64) -> (f64, f64) {
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        (normal.sample(&mut self.rng), normal.sample(&mut self.rng))
    }

    fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        Poisson::new(mean).expect("mean validated").sample(&mut self.rng) as u64
    }

    fn exp_secs(&mut self, mean_min: f64) -> f64 {
        if mean_min <= 0.0 {
            return 0.0;
        }
        Exp::new(1.0 / (mean_min * 60.0)).expect("rate validated").sample(&mut self.rng)
    }

    fn reliability(&mut self, dist: &WeightedIndex<f64>) -> u8 {
        dist.sample(&mut self.rng) as u8 + 1
    }
}

struct DraftReport {
    time: Timestamp,
    lat: f64,
    lon: f64,
    reliability: u8,
    incident: Option<usize>,
}

/// Generates a scenario. Identical configurations give identical output.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let start = cfg.start_time()?;
    let end = cfg.end_time()?;
    let span = (end - start) as f64;
    let region = cfg.region;
    let side = project(region.lat_min, region.lon_min, region.lat_max, region.lon_max);
    let mut s = Sampler { cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed), side };

    // Incidents: occurrence, location, official report time.
    struct DraftIncident {
        occurred: Timestamp,
        official: Timestamp,
        e: f64,
        n: f64,
    }
    let mut incidents: Vec<DraftIncident> = Vec::new();
    let n_inc = s.poisson(cfg.incident_rate * cfg.duration_days);
    if n_inc > 0 {
        let hot_km: Vec<(f64, f64)> =
            cfg.hotspots.iter().map(|h| project(region.lat_min, region.lon_min, h.lat, h.lon)).collect();
        let pick = WeightedIndex::new(cfg.hotspots.iter().map(|h| h.weight))
            .map_err(|e| Error::config("synth", format!("hotspots: {e}")))?;
        for _ in 0..n_inc {
            let occurred = start + (s.rng.random::<f64>() * span) as i64;
            let h = pick.sample(&mut s.rng);
            let mut point = None;
            for _ in 0..1000 {
                let (de, dn) = s.gaussian_offset(cfg.hotspots[h].sigma_km);
                let (e, n) = (hot_km[h].0 + de, hot_km[h].1 + dn);
                if s.in_region_km(e, n) {
                    point = Some((e, n));
                    break;
                }
            }
            let (e, n) = point.unwrap_or_else(|| (hot_km[h].0.clamp(0.0, side.0), hot_km[h].1.clamp(0.0, side.1)));
            let official = occurred + s.exp_secs(cfg.official_delay_mean_min) as i64;
            incidents.push(DraftIncident { occurred, official, e, n });
        }
    }
    incidents.sort_by_key(|i| (i.official, i.occurred));
    let incidents: Vec<DraftIncident> = incidents.into_iter().filter(|i| i.official < end).collect();

    // Genuine reports trail each incident in time and drift from it in space.
    let rel_true = WeightedIndex::new(&cfg.reliability_true).map_err(|e| Error::config("synth", e.to_string()))?;
    let rel_false = WeightedIndex::new(&cfg.reliability_false).map_err(|e| Error::config("synth", e.to_string()))?;
    let mut drafts: Vec<DraftReport> = Vec::new();
    for (idx, inc) in incidents.iter().enumerate() {
        for _ in 0..s.poisson(cfg.report_rate_mean) {
            let t = inc.occurred + s.exp_secs(cfg.report_delay_mean_min) as i64;
            let (de, dn) = s.gaussian_offset(cfg.report_spatial_sigma_km);
            let reliability = s.reliability(&rel_true);
            let (e, n) = (inc.e + de, inc.n + dn);
            if t < end && s.in_region_km(e, n) {
                let (lat, lon) = s.to_latlon(e, n);
                drafts.push(DraftReport { time: t, lat, lon, reliability, incident: Some(idx) });
            }
        }
    }
    for _ in 0..s.poisson(cfg.false_report_rate * cfg.duration_days) {
        let t = start + (s.rng.random::<f64>() * span) as i64;
        let (e, n) = s.uniform_point();
        let reliability = s.reliability(&rel_false);
        let (lat, lon) = s.to_latlon(e, n);
        drafts.push(DraftReport { time: t, lat, lon, reliability, incident: None });
    }
    drafts.sort_by_key(|r| r.time);

    let incident_ids: Vec<String> = (0..incidents.len()).map(|i| format!("inc{:05}", i + 1)).collect();
    let mut reports = Vec::with_capacity(drafts.len());
    let mut provenance = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.into_iter().enumerate() {
        let id = format!("r{:06}", i + 1);
        provenance.push(Provenance { report_id: id.clone(), incident_id: d.incident.map(|k| incident_ids[k].clone()) });
        reports.push(Report { id, time: d.time, lat: d.lat, lon: d.lon, reliability: d.reliability });
    }

    // Road segments on a regular lattice; speeds dip near incidents and at random.
    let nx = (side.0 / cfg.segment_spacing_km).ceil().max(1.0) as usize;
    let ny = (side.1 / cfg.segment_spacing_km).ceil().max(1.0) as usize;
    let segments: Vec<(String, f64, f64)> = (0..nx)
        .flat_map(|x| (0..ny).map(move |y| (x, y)))
        .map(|(x, y)| {
            let e = ((x as f64 + 0.5) * cfg.segment_spacing_km).min(side.0);
            let n = ((y as f64 + 0.5) * cfg.segment_spacing_km).min(side.1);
            let (lat, lon) = s.to_latlon(e, n);
            (format!("s{x:03}_{y:03}"), lat, lon)
        })
        .collect();
    let mut traffic: Vec<TrafficObservation> = Vec::new();
    let slowdown = |seg: usize, t: Timestamp, bump: f64, out: &mut Vec<TrafficObservation>| {
        let (id, lat, lon) = &segments[seg];
        for (time, speed) in [(t, REFERENCE_SPEED * (1.0 - bump)), (t + CONGESTION_SECS, REFERENCE_SPEED)] {
            if time < end {
                out.push(TrafficObservation {
                    segment_id: id.clone(),
                    time,
                    speed,
                    reference_speed: REFERENCE_SPEED,
                    lat: *lat,
                    lon: *lon,
                });
            }
        }
    };
    if cfg.congestion_bump > 0.0 {
        for inc in &incidents {
            let p = s.to_latlon(inc.e, inc.n);
            for seg in 0..segments.len() {
                if geodesic_km(p, (segments[seg].1, segments[seg].2)) <= CONGESTION_RADIUS_KM {
                    slowdown(seg, inc.occurred, cfg.congestion_bump, &mut traffic);
                }
            }
        }
        for _ in 0..s.poisson(cfg.background_congestion_rate * cfg.duration_days) {
            let seg = s.rng.random_range(0..segments.len());
            let t = start + (s.rng.random::<f64>() * span) as i64;
            let bump = s.rng.random::<f64>() * cfg.congestion_bump;
            slowdown(seg, t, bump, &mut traffic);
        }
    }

    // Weather stations on a small lattice sharing one latent AR(1) series.
    let mut weather = Vec::new();
    let p = &cfg.precip;
    if p.stations > 0 {
        let per_side = (p.stations as f64).sqrt().ceil() as usize;
        let stations: Vec<(String, f64, f64)> = (0..p.stations)
            .map(|i| {
                let (gx, gy) = (i % per_side, i / per_side);
                let e = (gx as f64 + 0.5) / per_side as f64 * side.0;
                let n = (gy as f64 + 0.5) / per_side as f64 * side.1;
                let (lat, lon) = s.to_latlon(e, n);
                (format!("ws{:02}", i + 1), lat, lon)
            })
            .collect();
        let shock = Normal::new(0.0, 1.0).expect("unit normal");
        let stationary_sd = p.sigma / (1.0 - p.phi * p.phi).sqrt();
        let mut latent = stationary_sd * shock.sample(&mut s.rng);
        let step = i64::from(p.step_min) * 60;
        let mut t = start;
        while t < end {
            for (id, lat, lon) in &stations {
                let v = (latent + p.offset + p.station_noise * shock.sample(&mut s.rng)).max(0.0);
                weather.push(WeatherObservation {
                    station_id: id.clone(),
                    time: t,
                    precipitation: (v * 100.0).round() / 100.0,
                    lat: *lat,
                    lon: *lon,
                });
            }
            latent = p.phi * latent + p.sigma * shock.sample(&mut s.rng);
            t += step;
        }
    }

    let mut occurrence_times = Vec::with_capacity(incidents.len());
    let incident_records = incidents
        .iter()
        .enumerate()
        .map(|(i, inc)| {
            occurrence_times.push(inc.occurred);
            let (lat, lon) = s.to_latlon(inc.e, inc.n);
            Incident { id: incident_ids[i].clone(), time: inc.official, lat, lon }
        })
        .collect();
    let dataset = Dataset::from_records(region, reports, incident_records, traffic, weather);
    Ok(Scenario { dataset, provenance, occurrence_times })
}

/// Writes the dataset CSVs plus `provenance.csv` (`report_id,incident_id|FALSE`).
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<data::DataPaths> {
    let paths = data::write_dataset(&scenario.dataset, dir)?;
    let path = dir.join("provenance.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(["report_id", "incident_id"])?;
    for p in &scenario.provenance {
        w.write_record([p.report_id.as_str(), p.incident_id.as_deref().unwrap_or("FALSE")])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(days: f64) -> ScenarioConfig {
        ScenarioConfig { duration_days: days, ..ScenarioConfig::default() }
    }

    #[test]
    fn zero_rates_give_no_events() {
        let cfg = ScenarioConfig { incident_rate: 0.0, false_report_rate: 0.0, ..short(3.0) };
        let sc = generate(&cfg).unwrap();
        assert!(sc.dataset.incidents.is_empty());
        assert!(sc.dataset.reports.is_empty());
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&short(5.0)).unwrap();
        let b = generate(&short(5.0)).unwrap();
        assert_eq!(a, b);
        let c = generate(&ScenarioConfig { seed: 7, ..short(5.0) }).unwrap();
        assert_ne!(a.dataset.reports, c.dataset.reports);
    }

    #[test]
    fn records_respect_region_and_ranges() {
        let sc = generate(&short(10.0)).unwrap();
        let ds = &sc.dataset;
        let r = ds.region;
        assert!(ds.reports.iter().all(|x| r.contains(x.lat, x.lon) && (1..=10).contains(&x.reliability)));
        assert!(ds.incidents.iter().all(|x| r.contains(x.lat, x.lon)));
        assert!(ds.traffic.iter().all(|x| x.speed >= 0.0 && x.reference_speed > 0.0));
        assert!(ds.weather.iter().all(|x| x.precipitation >= 0.0));
        assert!(ds.reports.windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(sc.provenance.len(), ds.reports.len());
    }

    #[test]
    fn official_report_trails_occurrence() {
        let sc = generate(&short(10.0)).unwrap();
        for (inc, occ) in sc.dataset.incidents.iter().zip(&sc.occurrence_times) {
            assert!(inc.time >= *occ);
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = ScenarioConfig { report_spatial_sigma_km: 0.0, ..ScenarioConfig::default() };
        match generate(&cfg) {
            Err(Error::Config { section, message }) => {
                assert_eq!(section, "synth");
                assert!(message.contains("report_spatial_sigma_km"));
            }
            other => panic!("{other:?}"),
        }
        let mut cfg = ScenarioConfig::default();
        cfg.reliability_true[0] += 0.5;
        assert!(generate(&cfg).is_err());
    }
}

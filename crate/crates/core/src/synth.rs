//! Seeded synthetic worlds with planted ground truth: snapshot series,
//! regions, urbanization, events, and a bid stream, all emitted in the
//! exact file formats the pipeline ingests. The planted values (per-event
//! displacement, anchor reuse, group medians) make every downstream
//! metric independently checkable.

use crate::campaign::{write_bids, BidRequest, CampaignError, LocSource};
use crate::events::{write_events, EventError, LocationEvent, Urbanization, UrbanizationMap};
use crate::geo::{cell_of, destination, haversine_km, CellId, GeoError, GeoPoint};
use crate::ip::{
    parse_snapshot, write_snapshot, ConnType, GeoIpSnapshot, IpAddress, IpRange, SnapshotError,
};
use crate::metrics::quantile_sorted;
use crate::region::{rect_region, regions_to_geojson, AdminRegion};
use crate::report::sha256_hex;
use crate::{TimeWindow, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("emitted snapshot failed self-validation: {0}")]
    SelfTest(#[from] SnapshotError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Sampling area of a synthetic country.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, p: GeoPoint) -> bool {
        self.lat_min <= p.lat
            && p.lat <= self.lat_max
            && self.lon_min <= p.lon
            && p.lon <= self.lon_max
    }

    fn lat_span(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    fn lon_span(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    fn validate(&self) -> Result<(), SynthError> {
        GeoPoint::new(self.lat_min, self.lon_min).map_err(SynthError::Geo)?;
        GeoPoint::new(self.lat_max, self.lon_max).map_err(SynthError::Geo)?;
        if self.lat_span() <= 0.01 || self.lon_span() <= 0.01 {
            return Err(SynthError::Infeasible(
                "bounding box is degenerate".to_string(),
            ));
        }
        Ok(())
    }
}

/// How anchors spread over the bounding box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorPlacement {
    Uniform,
    /// Population-like clumping: anchors scatter normally around a few
    /// cluster centers.
    Clustered {
        clusters: usize,
        spread_deg: f64,
    },
}

/// Log-normal displacement parameters per access technology; a zero or
/// negative median plants zero error, a zero sigma plants the median
/// exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ErrorModel {
    pub fixed_median_km: f64,
    pub fixed_sigma: f64,
    pub cellular_median_km: f64,
    pub cellular_sigma: f64,
}

impl ErrorModel {
    fn params(&self, conn: ConnType) -> (f64, f64) {
        match conn {
            ConnType::Cellular => (self.cellular_median_km, self.cellular_sigma),
            _ => (self.fixed_median_km, self.fixed_sigma),
        }
    }
}

/// Bid stream composition and per-source bid-floor models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BidStreamSpec {
    pub n_bids: usize,
    pub gps_fraction: f64,
    pub geoip_fraction: f64,
    pub user_fraction: f64,
    pub floor_median_geoip: f64,
    pub floor_median_gps: f64,
    /// Log-space spread of floors; 0 plants the medians exactly.
    pub floor_sigma: f64,
}

impl Default for BidStreamSpec {
    fn default() -> Self {
        BidStreamSpec {
            n_bids: 20_000,
            gps_fraction: 0.20,
            geoip_fraction: 0.50,
            user_fraction: 0.02,
            floor_median_geoip: 1.0,
            floor_median_gps: 2.08,
            floor_sigma: 0.25,
        }
    }
}

/// Full recipe of a synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub country: String,
    pub bbox: BoundingBox,
    pub n_anchors: usize,
    pub anchor_placement: AnchorPlacement,
    pub n_ranges: usize,
    pub n_events: usize,
    /// Fraction of events given an IP no range covers; they exercise the
    /// unmatched path end to end.
    pub gap_event_fraction: f64,
    pub n_days: u32,
    pub snapshot_period_days: u32,
    pub study_start: Timestamp,
    pub cellular_fraction: f64,
    pub error_model: ErrorModel,
    /// Per-level subdivision factors for levels 4, 3, 2, 1, each relative
    /// to its parent grid; level 5 is the whole country.
    pub region_splits: [u32; 4],
    pub urbanization_resolution: u8,
    pub carriers: Vec<String>,
    pub bidstream: Option<BidStreamSpec>,
    /// Emit a second provider series ("b") with an independent
    /// range-to-anchor assignment over the same anchors.
    pub second_series: bool,
    /// Redraw displacements that would push a true position outside the
    /// bounding box, keeping every event in-country.
    pub keep_events_in_bbox: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 42,
            country: "ES".to_string(),
            bbox: BoundingBox {
                lat_min: 36.0,
                lat_max: 43.5,
                lon_min: -9.0,
                lon_max: 3.0,
            },
            n_anchors: 600,
            anchor_placement: AnchorPlacement::Clustered {
                clusters: 8,
                spread_deg: 0.6,
            },
            n_ranges: 12_000,
            n_events: 20_000,
            gap_event_fraction: 0.02,
            n_days: 30,
            snapshot_period_days: 10,
            study_start: 1_598_918_400, // 2020-09-01T00:00:00Z
            cellular_fraction: 0.45,
            error_model: ErrorModel {
                fixed_median_km: 1.5,
                fixed_sigma: 1.0,
                cellular_median_km: 15.0,
                cellular_sigma: 1.0,
            },
            region_splits: [2, 2, 2, 2],
            urbanization_resolution: 9,
            carriers: vec![
                "carrier_a".to_string(),
                "carrier_b".to_string(),
                "carrier_c".to_string(),
                "carrier_d".to_string(),
            ],
            bidstream: Some(BidStreamSpec::default()),
            second_series: true,
            keep_events_in_bbox: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.bbox.validate()?;
        let err = |msg: String| Err(SynthError::Infeasible(msg));
        if self.n_anchors == 0 || self.n_ranges == 0 || self.n_events == 0 {
            return err("anchor, range, and event counts must be positive".into());
        }
        if self.n_anchors > self.n_ranges {
            return err(format!(
                "{} anchors cannot all be used by only {} ranges",
                self.n_anchors, self.n_ranges
            ));
        }
        if self.n_days == 0 || self.snapshot_period_days == 0 {
            return err("study length and snapshot period must be positive".into());
        }
        for frac in [self.cellular_fraction, self.gap_event_fraction] {
            if !(0.0..=1.0).contains(&frac) {
                return err(format!("fraction {frac} outside [0, 1]"));
            }
        }
        if !self.error_model.fixed_sigma.is_finite()
            || !self.error_model.cellular_sigma.is_finite()
            || !self.error_model.fixed_median_km.is_finite()
            || !self.error_model.cellular_median_km.is_finite()
        {
            return err("error model parameters must be finite".into());
        }
        if self.carriers.is_empty() {
            return err("at least one carrier is required".into());
        }
        if let Some(spec) = &self.bidstream {
            let total = spec.gps_fraction + spec.geoip_fraction + spec.user_fraction;
            if !(0.0..=1.0).contains(&total) {
                return err("bid source fractions exceed 1".into());
            }
            if spec.floor_median_geoip <= 0.0 || spec.floor_median_gps <= 0.0 {
                return err("bid floor medians must be positive".into());
            }
        }
        if self.region_splits.contains(&0) {
            return err("region splits must be positive".into());
        }
        let finest: u64 = self.region_splits.iter().map(|&s| s as u64).product();
        if finest * finest > 1_000_000 {
            return err("region grid is too fine".into());
        }
        Ok(())
    }

    pub fn study_window(&self) -> TimeWindow {
        TimeWindow {
            from: self.study_start,
            to: self.study_start + self.n_days as Timestamp * 86_400,
        }
    }
}

/// What the generator knows to be true about its world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub expected_range_count: usize,
    pub expected_anchor_count: usize,
    pub expected_reuse_factor: f64,
    pub event_count: usize,
    /// Realized great-circle displacement per events-file row; -1 marks
    /// events planted with an uncovered IP (they never join).
    pub displacement_km: Vec<f64>,
    pub intended_median_km: BTreeMap<String, f64>,
    pub realized_median_km: BTreeMap<String, f64>,
}

/// Hash inventory of an emitted world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: WorldConfig,
    pub files: BTreeMap<String, String>,
}

pub struct GeneratedWorld {
    pub dir: PathBuf,
    pub planted: PlantedTruth,
    pub manifest: Manifest,
}

fn domain_rng(seed: u64, domain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Quantize a coordinate to 1e-4 degrees, the granularity providers emit.
/// Quantized values survive the text round trip bit-exactly, which keeps
/// anchor deduplication deterministic.
fn quantize(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Distinct quantized anchor coordinates inside the box (with a small
/// interior margin so nothing sits on a region border).
pub fn generate_anchor_points(
    rng: &mut ChaCha8Rng,
    n: usize,
    bbox: &BoundingBox,
    placement: &AnchorPlacement,
) -> Result<Vec<GeoPoint>, SynthError> {
    let lat_margin = bbox.lat_span() * 0.01;
    let lon_margin = bbox.lon_span() * 0.01;
    let lat_lo = bbox.lat_min + lat_margin;
    let lat_hi = bbox.lat_max - lat_margin;
    let lon_lo = bbox.lon_min + lon_margin;
    let lon_hi = bbox.lon_max - lon_margin;

    let centers: Vec<(f64, f64)> = match placement {
        AnchorPlacement::Uniform => Vec::new(),
        AnchorPlacement::Clustered { clusters, .. } => (0..(*clusters).max(1))
            .map(|_| {
                (
                    rng.random_range(lat_lo..lat_hi),
                    rng.random_range(lon_lo..lon_hi),
                )
            })
            .collect(),
    };

    let mut seen: HashSet<(u64, u64)> = HashSet::with_capacity(n);
    let mut anchors = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let budget = n.saturating_mul(200) + 1000;
    while anchors.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::Infeasible(format!(
                "could not place {n} distinct anchors in the box"
            )));
        }
        let (lat, lon) = match placement {
            AnchorPlacement::Uniform => (
                rng.random_range(lat_lo..lat_hi),
                rng.random_range(lon_lo..lon_hi),
            ),
            AnchorPlacement::Clustered { spread_deg, .. } => {
                let (clat, clon) = centers[rng.random_range(0..centers.len())];
                let dlat: f64 = rng.sample::<f64, _>(StandardNormal) * spread_deg;
                let dlon: f64 = rng.sample::<f64, _>(StandardNormal) * spread_deg;
                (
                    (clat + dlat).clamp(lat_lo, lat_hi),
                    (clon + dlon).clamp(lon_lo, lon_hi),
                )
            }
        };
        let anchor = GeoPoint {
            lat: quantize(lat),
            lon: quantize(lon),
        };
        if seen.insert(anchor.bits()) {
            anchors.push(anchor);
        }
    }
    Ok(anchors)
}

/// Non-overlapping ranges walking up from 11.0.0.0, each mapped to an
/// anchor. Every anchor is used at least once, so the distinct-anchor
/// count of the emitted snapshot is exactly `anchors.len()`.
pub fn generate_ranges(
    rng: &mut ChaCha8Rng,
    anchors: &[GeoPoint],
    n_ranges: usize,
    cellular_fraction: f64,
) -> Result<Vec<IpRange>, SynthError> {
    if anchors.is_empty() || n_ranges < anchors.len() {
        return Err(SynthError::Infeasible(format!(
            "{} ranges cannot cover {} anchors",
            n_ranges,
            anchors.len()
        )));
    }
    let mut assignment: Vec<usize> = (0..n_ranges)
        .map(|i| {
            if i < anchors.len() {
                i
            } else {
                rng.random_range(0..anchors.len())
            }
        })
        .collect();
    // Decorrelate anchor ids from address order.
    for i in (1..assignment.len()).rev() {
        assignment.swap(i, rng.random_range(0..=i));
    }

    let mut ranges = Vec::with_capacity(n_ranges);
    let mut cursor: u64 = u32::from_be_bytes([11, 0, 0, 0]) as u64;
    for anchor_idx in assignment {
        let start = cursor + rng.random_range(0..=255) as u64;
        let end = start + rng.random_range(0..=1023) as u64;
        if end > u32::MAX as u64 {
            return Err(SynthError::Infeasible(format!(
                "{n_ranges} ranges exhaust the IPv4 space"
            )));
        }
        let conn_type = if rng.random_bool(cellular_fraction) {
            ConnType::Cellular
        } else {
            ConnType::Fixed
        };
        ranges.push(IpRange {
            start: IpAddress(start as u32),
            end: IpAddress(end as u32),
            anchor: anchors[anchor_idx],
            conn_type,
        });
        cursor = end + 1;
    }
    Ok(ranges)
}

/// Nested rectangular regions: level 5 covers the padded country frame,
/// each following level subdivides its parent by the configured factor.
pub fn generate_regions(config: &WorldConfig) -> Vec<AdminRegion> {
    // Pad beyond the sampling box so border samples stay strictly inside
    // level 5, and shift interior grid lines off the 1e-4 lattice so
    // quantized anchors never sit exactly on a boundary.
    let pad = 0.0050500000001;
    let s = config.bbox.lat_min - pad;
    let n = config.bbox.lat_max + pad;
    let w = config.bbox.lon_min - pad;
    let e = config.bbox.lon_max + pad;
    let country = &config.country;

    let mut regions = vec![rect_region(country, 5, country, s, n, w, e)];
    let mut rows = 1u32;
    let mut cols = 1u32;
    for (offset, &split) in config.region_splits.iter().enumerate() {
        let level = 4 - offset as u8;
        rows *= split;
        cols *= split;
        let lat_step = (n - s) / rows as f64;
        let lon_step = (e - w) / cols as f64;
        for row in 0..rows {
            for col in 0..cols {
                regions.push(rect_region(
                    &format!("{country}-L{level}-{row}-{col}"),
                    level,
                    country,
                    s + row as f64 * lat_step,
                    s + (row + 1) as f64 * lat_step,
                    w + col as f64 * lon_step,
                    w + (col + 1) as f64 * lon_step,
                ));
            }
        }
    }
    regions
}

/// Urbanization classes over the country frame: a few urban centers,
/// semi-urban halos, rural elsewhere.
pub fn generate_urbanization(
    rng: &mut ChaCha8Rng,
    config: &WorldConfig,
) -> Result<UrbanizationMap, SynthError> {
    let bbox = &config.bbox;
    let centers: Vec<GeoPoint> = (0..3)
        .map(|_| GeoPoint {
            lat: rng.random_range(bbox.lat_min..bbox.lat_max),
            lon: rng.random_range(bbox.lon_min..bbox.lon_max),
        })
        .collect();
    let span_deg = bbox.lat_span().max(bbox.lon_span());
    let urban_radius = span_deg * 0.08;
    let semi_radius = span_deg * 0.20;

    let res = config.urbanization_resolution;
    let sw = cell_of(
        GeoPoint {
            lat: bbox.lat_min,
            lon: bbox.lon_min,
        },
        res,
    )?;
    let ne = cell_of(
        GeoPoint {
            lat: bbox.lat_max,
            lon: bbox.lon_max,
        },
        res,
    )?;
    let side = 1u64 << res;
    let (row_lo, col_lo) = (sw.index / side, sw.index % side);
    let (row_hi, col_hi) = (ne.index / side, ne.index % side);

    let mut cells = Vec::new();
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let cell = CellId {
                resolution: res,
                index: row * side + col,
            };
            let (lat_min, lat_max, lon_min, lon_max) = crate::geo::cell_bounds(cell);
            let center = GeoPoint {
                lat: (lat_min + lat_max) / 2.0,
                lon: (lon_min + lon_max) / 2.0,
            };
            let nearest_deg = centers
                .iter()
                .map(|c| ((c.lat - center.lat).powi(2) + (c.lon - center.lon).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let class = if nearest_deg <= urban_radius {
                Urbanization::Urban
            } else if nearest_deg <= semi_radius {
                Urbanization::SemiUrban
            } else {
                Urbanization::Rural
            };
            cells.push((cell, class));
        }
    }
    Ok(UrbanizationMap::from_cells(cells)?)
}

fn draw_displacement(rng: &mut ChaCha8Rng, median_km: f64, sigma: f64) -> f64 {
    if median_km <= 0.0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return median_km;
    }
    let dist = LogNormal::new(median_km.ln(), sigma).expect("finite parameters");
    dist.sample(rng)
}

/// A true position displaced from the anchor; redraws keep it inside the
/// box when requested. Returns the position and its realized distance.
fn place_around(
    rng: &mut ChaCha8Rng,
    anchor: GeoPoint,
    bbox: &BoundingBox,
    median_km: f64,
    sigma: f64,
    keep_in_bbox: bool,
) -> (GeoPoint, f64) {
    let mut d = draw_displacement(rng, median_km, sigma);
    if d <= 0.0 {
        return (anchor, 0.0);
    }
    for attempt in 0..200 {
        let bearing = rng.random_range(0.0..TAU);
        let pos = destination(anchor, bearing, d);
        if !keep_in_bbox || bbox.contains(pos) {
            return (pos, haversine_km(pos, anchor));
        }
        if attempt % 16 == 15 {
            d /= 2.0;
        }
    }
    (anchor, 0.0)
}

fn draw_floor(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return median;
    }
    let z: f64 = rng.sample(StandardNormal);
    // Quantize to 1/256 currency units; keeps scaling tests exact.
    let raw = median * (sigma * z).exp();
    ((raw * 256.0).round() / 256.0).max(1.0 / 256.0)
}

struct EventBatch {
    events: Vec<LocationEvent>,
    displacement_km: Vec<f64>,
    realized_by_conn: BTreeMap<String, Vec<f64>>,
}

fn generate_events(rng: &mut ChaCha8Rng, config: &WorldConfig, ranges: &[IpRange]) -> EventBatch {
    let window = config.study_window();
    let mut events = Vec::with_capacity(config.n_events);
    let mut displacement_km = Vec::with_capacity(config.n_events);
    let mut realized: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..config.n_events {
        let timestamp = rng.random_range(window.from..window.to);
        let carrier = config.carriers[rng.random_range(0..config.carriers.len())].clone();
        if rng.random_bool(config.gap_event_fraction) {
            // An IP below the range base; never covered by any snapshot.
            let ip = IpAddress(rng.random_range(0x0a00_0000..0x0b00_0000));
            let pos_gt = GeoPoint {
                lat: rng.random_range(config.bbox.lat_min..config.bbox.lat_max),
                lon: rng.random_range(config.bbox.lon_min..config.bbox.lon_max),
            };
            events.push(LocationEvent {
                timestamp,
                pos_gt,
                ip,
                carrier,
                country: config.country.clone(),
            });
            displacement_km.push(-1.0);
            continue;
        }
        let range = &ranges[rng.random_range(0..ranges.len())];
        let ip = IpAddress(rng.random_range(range.start.0..=range.end.0));
        let (median, sigma) = config.error_model.params(range.conn_type);
        let (pos_gt, realized_km) = place_around(
            rng,
            range.anchor,
            &config.bbox,
            median,
            sigma,
            config.keep_events_in_bbox,
        );
        events.push(LocationEvent {
            timestamp,
            pos_gt,
            ip,
            carrier,
            country: config.country.clone(),
        });
        displacement_km.push(realized_km);
        realized
            .entry(range.conn_type.as_str().to_string())
            .or_default()
            .push(realized_km);
    }
    EventBatch {
        events,
        displacement_km,
        realized_by_conn: realized,
    }
}

fn generate_bidstream(
    rng: &mut ChaCha8Rng,
    config: &WorldConfig,
    spec: &BidStreamSpec,
    ranges: &[IpRange],
) -> Vec<BidRequest> {
    let window = config.study_window();
    let mut bids = Vec::with_capacity(spec.n_bids);
    for _ in 0..spec.n_bids {
        let timestamp = rng.random_range(window.from..window.to);
        let roll: f64 = rng.random_range(0.0..1.0);
        let (loc_source, floor_median) = if roll < spec.gps_fraction {
            (LocSource::Gps, spec.floor_median_gps)
        } else if roll < spec.gps_fraction + spec.geoip_fraction {
            (LocSource::Geoip, spec.floor_median_geoip)
        } else if roll < spec.gps_fraction + spec.geoip_fraction + spec.user_fraction {
            (LocSource::User, spec.floor_median_geoip)
        } else {
            (LocSource::Unavailable, spec.floor_median_geoip)
        };
        let bid_floor = draw_floor(rng, floor_median, spec.floor_sigma);

        let bid = match loc_source {
            LocSource::Gps => {
                let range = &ranges[rng.random_range(0..ranges.len())];
                let ip = IpAddress(rng.random_range(range.start.0..=range.end.0));
                let (median, sigma) = config.error_model.params(range.conn_type);
                let (pos_gt, _) = place_around(
                    rng,
                    range.anchor,
                    &config.bbox,
                    median,
                    sigma,
                    config.keep_events_in_bbox,
                );
                BidRequest {
                    timestamp,
                    ip,
                    loc_source,
                    pos: Some(pos_gt),
                    bid_floor,
                }
            }
            LocSource::Geoip => {
                let range = &ranges[rng.random_range(0..ranges.len())];
                let ip = IpAddress(rng.random_range(range.start.0..=range.end.0));
                BidRequest {
                    timestamp,
                    ip,
                    loc_source,
                    pos: Some(range.anchor),
                    bid_floor,
                }
            }
            LocSource::User => {
                let pos = GeoPoint {
                    lat: rng.random_range(config.bbox.lat_min..config.bbox.lat_max),
                    lon: rng.random_range(config.bbox.lon_min..config.bbox.lon_max),
                };
                let ip = IpAddress(rng.random_range(0x0a00_0000..0x0b00_0000));
                BidRequest {
                    timestamp,
                    ip,
                    loc_source,
                    pos: Some(pos),
                    bid_floor,
                }
            }
            LocSource::Unavailable => {
                let range = &ranges[rng.random_range(0..ranges.len())];
                let ip = IpAddress(rng.random_range(range.start.0..=range.end.0));
                BidRequest {
                    timestamp,
                    ip,
                    loc_source,
                    pos: None,
                    bid_floor,
                }
            }
        };
        bids.push(bid);
    }
    bids
}

type FileSink<'a> = dyn FnMut(&str, &[u8]) -> Result<(), SynthError> + 'a;

fn snapshot_windows(config: &WorldConfig) -> Vec<TimeWindow> {
    let study = config.study_window();
    let period = config.snapshot_period_days as Timestamp * 86_400;
    let mut windows = Vec::new();
    let mut from = study.from;
    while from < study.to {
        let to = (from + period).min(study.to);
        windows.push(TimeWindow { from, to });
        from = to;
    }
    windows
}

/// Reassign every range to a fresh anchor choice (coverage preserved);
/// the second provider's view of the same address space.
fn reassign_anchors(
    rng: &mut ChaCha8Rng,
    ranges: &[IpRange],
    anchors: &[GeoPoint],
) -> Vec<IpRange> {
    let mut assignment: Vec<usize> = (0..ranges.len())
        .map(|i| {
            if i < anchors.len() {
                i
            } else {
                rng.random_range(0..anchors.len())
            }
        })
        .collect();
    for i in (1..assignment.len()).rev() {
        assignment.swap(i, rng.random_range(0..=i));
    }
    ranges
        .iter()
        .zip(assignment)
        .map(|(r, idx)| IpRange {
            anchor: anchors[idx],
            ..*r
        })
        .collect()
}

/// Generate a world under `out_dir`. Identical seeds and configs emit
/// byte-identical files; the manifest records their hashes.
pub fn generate_world(config: &WorldConfig, out_dir: &Path) -> Result<GeneratedWorld, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::create_dir_all(out_dir.join("snapshots"))?;

    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut emit = |rel: &str, bytes: &[u8]| -> Result<(), SynthError> {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    };

    // Anchors and the primary assignment.
    let mut rng_anchors = domain_rng(config.seed, 1);
    let anchors = generate_anchor_points(
        &mut rng_anchors,
        config.n_anchors,
        &config.bbox,
        &config.anchor_placement,
    )?;
    let mut rng_ranges = domain_rng(config.seed, 2);
    let ranges_a = generate_ranges(
        &mut rng_ranges,
        &anchors,
        config.n_ranges,
        config.cellular_fraction,
    )?;
    let ranges_b = config.second_series.then(|| {
        let mut rng_b = domain_rng(config.seed, 6);
        reassign_anchors(&mut rng_b, &ranges_a, &anchors)
    });

    // Snapshot series: the same stationary ranges under every window.
    let windows = snapshot_windows(config);
    let mut index_rows = String::from("provider,valid_from,valid_to,file\n");
    let write_series = |provider: &str,
                        ranges: &[IpRange],
                        index_rows: &mut String,
                        emit: &mut FileSink|
     -> Result<(), SynthError> {
        for (i, window) in windows.iter().enumerate() {
            let snapshot = GeoIpSnapshot::from_ranges(ranges.to_vec(), provider, *window)?;
            let mut buf = Vec::new();
            write_snapshot(&snapshot, &mut buf)?;
            // Self-test: whatever we emit must parse back cleanly.
            parse_snapshot(buf.as_slice(), provider, *window)?;
            let rel = format!("snapshots/{provider}_{i}.csv");
            emit(&rel, &buf)?;
            index_rows.push_str(&format!("{provider},{},{},{rel}\n", window.from, window.to));
        }
        Ok(())
    };
    write_series("a", &ranges_a, &mut index_rows, &mut emit)?;
    if let Some(ranges_b) = &ranges_b {
        write_series("b", ranges_b, &mut index_rows, &mut emit)?;
    }
    emit("snapshots.csv", index_rows.as_bytes())?;

    // Regions and urbanization.
    let regions = generate_regions(config);
    emit("regions.geojson", regions_to_geojson(&regions).as_bytes())?;
    let mut rng_urb = domain_rng(config.seed, 5);
    let urbanization = generate_urbanization(&mut rng_urb, config)?;
    let mut urb_buf = Vec::new();
    urbanization.write(&mut urb_buf)?;
    emit("urbanization.csv", &urb_buf)?;

    // Events with planted displacements.
    let mut rng_events = domain_rng(config.seed, 3);
    let batch = generate_events(&mut rng_events, config, &ranges_a);
    let mut events_buf = Vec::new();
    write_events(&batch.events, &mut events_buf)?;
    emit("events.csv", &events_buf)?;

    // Bid stream.
    if let Some(spec) = &config.bidstream {
        let mut rng_bids = domain_rng(config.seed, 4);
        let bids = generate_bidstream(&mut rng_bids, config, spec, &ranges_a);
        let mut bids_buf = Vec::new();
        write_bids(&bids, &mut bids_buf)?;
        emit("bidstream.csv", &bids_buf)?;
    }

    // Planted truth.
    let realized_median_km = batch
        .realized_by_conn
        .iter()
        .map(|(conn, values)| {
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            (conn.clone(), quantile_sorted(&sorted, 0.5))
        })
        .collect();
    let mut intended_median_km = BTreeMap::new();
    intended_median_km.insert("fixed".to_string(), config.error_model.fixed_median_km);
    intended_median_km.insert(
        "cellular".to_string(),
        config.error_model.cellular_median_km,
    );
    let planted = PlantedTruth {
        expected_range_count: config.n_ranges,
        expected_anchor_count: config.n_anchors,
        expected_reuse_factor: config.n_ranges as f64 / config.n_anchors as f64,
        event_count: batch.events.len(),
        displacement_km: batch.displacement_km,
        intended_median_km,
        realized_median_km,
    };
    let planted_json = format!("{}\n", serde_json::to_string_pretty(&planted)?);
    emit("planted_truth.json", planted_json.as_bytes())?;

    let manifest = Manifest {
        tool: "geoaudit".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        files,
    };
    let manifest_json = format!("{}\n", serde_json::to_string_pretty(&manifest)?);
    std::fs::write(out_dir.join("manifest.json"), manifest_json)?;

    Ok(GeneratedWorld {
        dir: out_dir.to_path_buf(),
        planted,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ip::GeoIpSnapshot;

    fn tiny_config(seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            n_anchors: 40,
            n_ranges: 400,
            n_events: 500,
            bidstream: Some(BidStreamSpec {
                n_bids: 400,
                ..BidStreamSpec::default()
            }),
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_emits_identical_hashes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_world(&tiny_config(42), dir_a.path()).unwrap();
        let b = generate_world(&tiny_config(42), dir_b.path()).unwrap();
        assert_eq!(a.manifest.files, b.manifest.files);
        assert!(!a.manifest.files.is_empty());
        let c = generate_world(&tiny_config(43), dir_a.path()).unwrap();
        assert_ne!(a.manifest.files, c.manifest.files);
    }

    #[test]
    fn anchor_count_and_reuse_factor_are_exact() {
        let mut rng = domain_rng(7, 1);
        let config = tiny_config(7);
        let anchors =
            generate_anchor_points(&mut rng, 50, &config.bbox, &AnchorPlacement::Uniform).unwrap();
        let mut rng_r = domain_rng(7, 2);
        let ranges = generate_ranges(&mut rng_r, &anchors, 625, 0.5).unwrap();
        let snapshot =
            GeoIpSnapshot::from_ranges(ranges, "a", TimeWindow { from: 0, to: 1 }).unwrap();
        let set = snapshot.extract_anchors().unwrap();
        assert_eq!(set.len(), 50);
        assert_eq!(set.range_count, 625);
        assert_eq!(set.reuse_factor, 12.5);
    }

    #[test]
    fn more_anchors_than_ranges_is_infeasible() {
        let mut config = tiny_config(1);
        config.n_anchors = 100;
        config.n_ranges = 50;
        assert!(matches!(config.validate(), Err(SynthError::Infeasible(_))));
    }

    #[test]
    fn zero_error_world_plants_zero_displacement() {
        let mut config = tiny_config(5);
        config.error_model = ErrorModel {
            fixed_median_km: 0.0,
            fixed_sigma: 0.0,
            cellular_median_km: 0.0,
            cellular_sigma: 0.0,
        };
        config.gap_event_fraction = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&config, dir.path()).unwrap();
        assert!(world.planted.displacement_km.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn events_stay_inside_the_box() {
        let config = tiny_config(11);
        let dir = tempfile::tempdir().unwrap();
        generate_world(&config, dir.path()).unwrap();
        let ingest = crate::events::ingest_events(
            std::fs::File::open(dir.path().join("events.csv")).unwrap(),
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(ingest.events.len(), config.n_events);
        for event in &ingest.events {
            assert!(
                config.bbox.contains(event.pos_gt),
                "{} escaped",
                event.pos_gt
            );
        }
    }

    #[test]
    fn regions_nest_and_cover_every_anchor() {
        use crate::region::RegionIndex;
        let config = tiny_config(13);
        let regions = generate_regions(&config);
        let index = RegionIndex::build(regions, 7).unwrap();
        let mut rng = domain_rng(13, 1);
        let anchors =
            generate_anchor_points(&mut rng, 200, &config.bbox, &config.anchor_placement).unwrap();
        for anchor in anchors {
            for level in 1..=5 {
                let hit = index.region_of(anchor, level).unwrap();
                assert!(hit.is_some(), "anchor {anchor} missing at level {level}");
            }
        }
    }

    #[test]
    fn planted_medians_track_intent() {
        let mut config = tiny_config(17);
        config.n_events = 4000;
        config.gap_event_fraction = 0.0;
        config.error_model = ErrorModel {
            fixed_median_km: 2.0,
            fixed_sigma: 0.8,
            cellular_median_km: 20.0,
            cellular_sigma: 0.8,
        };
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&config, dir.path()).unwrap();
        let fixed = world.planted.realized_median_km["fixed"];
        let cellular = world.planted.realized_median_km["cellular"];
        assert!((fixed - 2.0).abs() / 2.0 < 0.15, "fixed median {fixed}");
        assert!(
            (cellular - 20.0).abs() / 20.0 < 0.15,
            "cellular median {cellular}"
        );
    }
}

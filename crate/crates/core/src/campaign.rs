//! Location-targeted campaign simulation over a bid stream: which
//! technology (GeoIP or GPS inventory) delivers a correctly located
//! impression at the lowest effective cost.

use crate::anchor::NearestAnchorIndex;
use crate::events::{Urbanization, UrbanizationMap};
use crate::geo::{GeoError, GeoPoint};
use crate::ip::{IpAddress, SnapshotSeries};
use crate::metrics::quantile_sorted;
use crate::region::{RegionError, RegionIndex};
use crate::{TimeWindow, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("bids header must be timestamp,ip,loc_source,lat,lon,bid_floor, got {0:?}")]
    BadHeader(String),
    #[error("too many invalid bid records: {invalid} of {total} exceeds {threshold:.3}%")]
    TooManyInvalid {
        invalid: usize,
        total: usize,
        threshold: f64,
    },
    #[error("bid stream has no {0} bids, cannot compute its median cost")]
    MissingSource(LocSource),
    #[error("cost for {0} must be positive, got {1}")]
    NonPositiveCost(&'static str, f64),
    #[error("optimal mode requires a nearest-anchor index")]
    MissingAnchorIndex,
    #[error("campaign window is empty: [{from},{to})")]
    EmptyWindow { from: Timestamp, to: Timestamp },
    #[error("win rate {0} outside [0, 1]")]
    BadWinRate(f64),
    #[error("scenario {scenario}: unknown target region {id:?}")]
    UnknownTarget { scenario: usize, id: String },
    #[error("scenario {scenario}: no region at level {level} in {country} matches the criteria")]
    NoQualifyingTargets {
        scenario: usize,
        level: u8,
        country: String,
    },
    #[error("bid stream is empty, cannot derive a simulation window")]
    EmptyBidStream,
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Where a bid request's location came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocSource {
    Gps,
    Geoip,
    User,
    Unavailable,
}

impl LocSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocSource::Gps => "gps",
            LocSource::Geoip => "geoip",
            LocSource::User => "user",
            LocSource::Unavailable => "unavailable",
        }
    }
}

impl fmt::Display for LocSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gps" => Ok(LocSource::Gps),
            "geoip" => Ok(LocSource::Geoip),
            "user" => Ok(LocSource::User),
            "unavailable" => Ok(LocSource::Unavailable),
            other => Err(format!("unknown loc_source {other:?}")),
        }
    }
}

/// One offered ad space.
#[derive(Debug, Clone, PartialEq)]
pub struct BidRequest {
    pub timestamp: Timestamp,
    pub ip: IpAddress,
    pub loc_source: LocSource,
    pub pos: Option<GeoPoint>,
    pub bid_floor: f64,
}

pub const BIDS_HEADER: [&str; 6] = ["timestamp", "ip", "loc_source", "lat", "lon", "bid_floor"];

#[derive(Debug)]
pub struct BidIngestResult {
    pub bids: Vec<BidRequest>,
    pub rejects: Vec<(u64, String)>,
    pub total_records: usize,
}

/// Parse `timestamp,ip,loc_source,lat,lon,bid_floor` records; lat/lon are
/// empty when no position is attached. GPS-source bids must carry one.
pub fn parse_bids<R: Read>(
    source: R,
    max_invalid_fraction: f64,
) -> Result<BidIngestResult, CampaignError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.iter().ne(BIDS_HEADER) {
        return Err(CampaignError::BadHeader(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }

    let mut bids = Vec::new();
    let mut rejects = Vec::new();
    let mut total = 0usize;
    'records: for record in reader.records() {
        let record = record?;
        total += 1;
        let line = record.position().map_or(0, |p| p.line());
        macro_rules! reject {
            ($($arg:tt)*) => {{
                rejects.push((line, format!($($arg)*)));
                continue 'records;
            }};
        }
        if record.len() != BIDS_HEADER.len() {
            reject!(
                "expected {} fields, got {}",
                BIDS_HEADER.len(),
                record.len()
            );
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let Ok(timestamp) = field(0).parse::<Timestamp>() else {
            reject!("bad timestamp {:?}", field(0))
        };
        let Ok(ip) = field(1).parse::<IpAddress>() else {
            reject!("bad ip {:?}", field(1))
        };
        let Ok(loc_source) = field(2).parse::<LocSource>() else {
            reject!("bad loc_source {:?}", field(2))
        };
        let pos = match (field(3), field(4)) {
            ("", "") => None,
            (lat, lon) => {
                let (Ok(lat), Ok(lon)) = (lat.parse::<f64>(), lon.parse::<f64>()) else {
                    reject!("bad coordinates {:?},{:?}", field(3), field(4))
                };
                match GeoPoint::new(lat, lon) {
                    Ok(p) => Some(p),
                    Err(e) => reject!("{e}"),
                }
            }
        };
        if loc_source == LocSource::Gps && pos.is_none() {
            reject!("gps bid without coordinates");
        }
        let Ok(bid_floor) = field(5).parse::<f64>() else {
            reject!("bad bid_floor {:?}", field(5))
        };
        if bid_floor.is_nan() || bid_floor < 0.0 {
            reject!("negative bid_floor {bid_floor}");
        }
        bids.push(BidRequest {
            timestamp,
            ip,
            loc_source,
            pos,
            bid_floor,
        });
    }

    if total > 0 && rejects.len() as f64 / total as f64 > max_invalid_fraction {
        return Err(CampaignError::TooManyInvalid {
            invalid: rejects.len(),
            total,
            threshold: max_invalid_fraction * 100.0,
        });
    }
    Ok(BidIngestResult {
        bids,
        rejects,
        total_records: total,
    })
}

pub fn write_bids<W: Write>(bids: &[BidRequest], sink: W) -> Result<(), CampaignError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(BIDS_HEADER)?;
    for b in bids {
        let (lat, lon) = match b.pos {
            Some(p) => (p.lat.to_string(), p.lon.to_string()),
            None => (String::new(), String::new()),
        };
        writer.write_record([
            b.timestamp.to_string(),
            b.ip.to_string(),
            b.loc_source.to_string(),
            lat,
            lon,
            b.bid_floor.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Which snapshot series a campaign reads its positions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DbSide {
    #[default]
    A,
    B,
}

/// A GPS-source bid with its true position plus the position each
/// database series assigns to its IP at that time. A missing side means
/// the IP had no range (or no snapshot) there; such bids are excluded from
/// campaigns that use that side.
#[derive(Debug, Clone)]
pub struct EnrichedBid {
    pub timestamp: Timestamp,
    pub ip: IpAddress,
    pub pos_gt: GeoPoint,
    pub pos_ip_a: Option<GeoPoint>,
    pub pos_ip_b: Option<GeoPoint>,
    pub bid_floor: f64,
}

impl EnrichedBid {
    pub fn pos_ip(&self, side: DbSide) -> Option<GeoPoint> {
        match side {
            DbSide::A => self.pos_ip_a,
            DbSide::B => self.pos_ip_b,
        }
    }
}

#[derive(Debug)]
pub struct EnrichmentResult {
    pub enriched: Vec<EnrichedBid>,
    /// Non-GPS bids dropped, counted per location source.
    pub dropped_by_source: BTreeMap<String, usize>,
}

/// Keep only GPS-source bids (their position is the ground truth) and
/// attach the time-matched database position from each series.
pub fn build_ground_truth_bids(
    bids: &[BidRequest],
    series_a: &SnapshotSeries,
    series_b: Option<&SnapshotSeries>,
) -> EnrichmentResult {
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    let mut enriched = Vec::new();
    for bid in bids {
        if bid.loc_source != LocSource::Gps {
            *dropped
                .entry(bid.loc_source.as_str().to_string())
                .or_insert(0) += 1;
            continue;
        }
        let pos_gt = bid.pos.expect("gps bids carry a position");
        let resolve = |series: &SnapshotSeries| {
            series
                .snapshot_at(bid.timestamp)
                .ok()
                .and_then(|snap| snap.lookup(bid.ip))
                .map(|range| range.anchor)
        };
        enriched.push(EnrichedBid {
            timestamp: bid.timestamp,
            ip: bid.ip,
            pos_gt,
            pos_ip_a: resolve(series_a),
            pos_ip_b: series_b.and_then(resolve),
            bid_floor: bid.bid_floor,
        });
    }
    EnrichmentResult {
        enriched,
        dropped_by_source: dropped,
    }
}

/// Raw and normalized per-impression costs of the two technologies. The
/// normalization divides by the cheaper one, so min(c_star) = 1 and the
/// model is invariant under currency rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub c_ip: f64,
    pub c_gps: f64,
    pub c_star_ip: f64,
    pub c_star_gps: f64,
}

impl CostModel {
    pub fn from_raw(c_ip: f64, c_gps: f64) -> Result<Self, CampaignError> {
        if !c_ip.is_finite() || c_ip <= 0.0 {
            return Err(CampaignError::NonPositiveCost("geoip", c_ip));
        }
        if !c_gps.is_finite() || c_gps <= 0.0 {
            return Err(CampaignError::NonPositiveCost("gps", c_gps));
        }
        let min = c_ip.min(c_gps);
        Ok(CostModel {
            c_ip,
            c_gps,
            c_star_ip: c_ip / min,
            c_star_gps: c_gps / min,
        })
    }
}

/// Cost model from a bid stream: the median bid floor of GeoIP-source and
/// GPS-source bids, normalized. Streams are per country; costs are never
/// normalized across currencies.
pub fn normalized_costs(bids: &[BidRequest]) -> Result<CostModel, CampaignError> {
    let mut floors_ip = Vec::new();
    let mut floors_gps = Vec::new();
    for bid in bids {
        match bid.loc_source {
            LocSource::Geoip => floors_ip.push(bid.bid_floor),
            LocSource::Gps => floors_gps.push(bid.bid_floor),
            _ => {}
        }
    }
    if floors_ip.is_empty() {
        return Err(CampaignError::MissingSource(LocSource::Geoip));
    }
    if floors_gps.is_empty() {
        return Err(CampaignError::MissingSource(LocSource::Gps));
    }
    floors_ip.sort_by(|a, b| a.partial_cmp(b).expect("floors are finite"));
    floors_gps.sort_by(|a, b| a.partial_cmp(b).expect("floors are finite"));
    CostModel::from_raw(
        quantile_sorted(&floors_ip, 0.5),
        quantile_sorted(&floors_gps, 0.5),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Gps,
    Geoip,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Gps => "gps",
            Strategy::Geoip => "geoip",
        }
    }
}

/// Effective-cost comparison for one campaign. GPS accuracy is 1 by
/// assumption, so its effective cost is just its normalized cost; the
/// GeoIP side divides by the campaign's measured accuracy. Zero accuracy
/// makes GeoIP infinitely expensive, reported as an explicit sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCosts {
    pub phi_ip: f64,
    pub phi_gps: f64,
    /// log10(phi_gps / phi_ip): positive means GeoIP is the better buy.
    pub gain: f64,
    pub strategy: Strategy,
}

/// The buying decision given a measured GeoIP accuracy and a cost model.
/// Ties in effective cost resolve to GPS (perfect accuracy at equal cost).
pub fn decide(a_ip: f64, costs: &CostModel) -> EffectiveCosts {
    debug_assert!((0.0..=1.0).contains(&a_ip));
    let phi_ip = if a_ip > 0.0 {
        costs.c_star_ip / a_ip
    } else {
        f64::INFINITY
    };
    let phi_gps = costs.c_star_gps;
    let strategy = if phi_ip < phi_gps {
        Strategy::Geoip
    } else {
        Strategy::Gps
    };
    let gain = if phi_ip.is_infinite() {
        f64::NEG_INFINITY
    } else {
        (phi_gps / phi_ip).log10()
    };
    EffectiveCosts {
        phi_ip,
        phi_gps,
        gain,
        strategy,
    }
}

/// Anchor-mapping regime a campaign evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Positions as the database assigned them.
    Actual,
    /// Positions reassigned to the anchor nearest the true location.
    Optimal,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Actual => "actual",
            Mode::Optimal => "optimal",
        }
    }
}

/// One concrete campaign to execute.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignSpec {
    pub target_region_id: String,
    pub level: u8,
    pub window: TimeWindow,
    pub win_rate: f64,
    pub mode: Mode,
    pub db_side: DbSide,
    pub rng_seed: u64,
}

fn serialize_sentinel<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        Some(x) if *x > 0.0 => s.serialize_str("inf"),
        Some(_) => s.serialize_str("-inf"),
    }
}

/// Outcome of one campaign. `a_ip` is absent when nothing was delivered;
/// `phi_ip` of an accuracy-zero campaign is the +inf sentinel and its gain
/// is -inf, serialized as the strings "inf"/"-inf".
#[derive(Debug, Clone, Serialize)]
pub struct CampaignResult {
    pub spec: CampaignSpec,
    pub candidate_count: usize,
    pub delivered_count: usize,
    pub on_target_count: usize,
    pub a_ip: Option<f64>,
    pub a_gps: f64,
    #[serde(serialize_with = "serialize_sentinel")]
    pub phi_ip: Option<f64>,
    pub phi_gps: f64,
    #[serde(serialize_with = "serialize_sentinel")]
    pub gain: Option<f64>,
    pub strategy: Option<Strategy>,
}

/// Execute one campaign: filter the window's bids to those the chosen
/// mapping places inside the target region, win a seeded uniform fraction
/// of them, and price the outcome.
pub fn run_campaign(
    spec: &CampaignSpec,
    bids: &[EnrichedBid],
    costs: &CostModel,
    regions: &RegionIndex,
    anchor_index: Option<&NearestAnchorIndex>,
) -> Result<CampaignResult, CampaignError> {
    if spec.window.from >= spec.window.to {
        return Err(CampaignError::EmptyWindow {
            from: spec.window.from,
            to: spec.window.to,
        });
    }
    if !(0.0..=1.0).contains(&spec.win_rate) {
        return Err(CampaignError::BadWinRate(spec.win_rate));
    }
    if spec.mode == Mode::Optimal && anchor_index.is_none() {
        return Err(CampaignError::MissingAnchorIndex);
    }

    let mut candidates: Vec<&EnrichedBid> = Vec::new();
    for bid in bids {
        if !spec.window.contains(bid.timestamp) {
            continue;
        }
        let claimed = match spec.mode {
            Mode::Actual => bid.pos_ip(spec.db_side),
            Mode::Optimal => {
                // Optimal mode still requires the database to know the IP.
                bid.pos_ip(spec.db_side)
                    .map(|_| anchor_index.expect("checked above").nearest(bid.pos_gt).0)
            }
        };
        let Some(claimed) = claimed else { continue };
        if regions.region_of(claimed, spec.level)? == Some(spec.target_region_id.as_str()) {
            candidates.push(bid);
        }
    }

    let delivered_count = (spec.win_rate * candidates.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut won = rand::seq::index::sample(&mut rng, candidates.len(), delivered_count).into_vec();
    won.sort_unstable();

    let mut on_target = 0usize;
    for &i in &won {
        if regions.region_of(candidates[i].pos_gt, spec.level)?
            == Some(spec.target_region_id.as_str())
        {
            on_target += 1;
        }
    }

    let a_ip = (delivered_count > 0).then(|| on_target as f64 / delivered_count as f64);
    let (phi_ip, phi_gps, gain, strategy) = match a_ip {
        Some(a) => {
            let e = decide(a, costs);
            (Some(e.phi_ip), e.phi_gps, Some(e.gain), Some(e.strategy))
        }
        None => (None, costs.c_star_gps, None, None),
    };

    Ok(CampaignResult {
        spec: spec.clone(),
        candidate_count: candidates.len(),
        delivered_count,
        on_target_count: on_target,
        a_ip,
        a_gps: 1.0,
        phi_ip,
        phi_gps,
        gain,
        strategy,
    })
}

// ---------------------------------------------------------------------------
// Batch simulation over a scenario grid.

fn default_repetitions() -> u32 {
    3
}
fn default_duration_days() -> (u32, u32) {
    (7, 14)
}
fn default_win_rate() -> (f64, f64) {
    (0.20, 0.40)
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Actual, Mode::Optimal]
}
fn default_targets() -> usize {
    5
}

/// One scenario: a (country, level, urbanization) slice with a number of
/// target regions to draw, or an explicit target list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub country: String,
    pub level: u8,
    #[serde(default)]
    pub urbanization: Option<Urbanization>,
    #[serde(default = "default_targets")]
    pub targets: usize,
    #[serde(default)]
    pub target_ids: Option<Vec<String>>,
    /// Raw (c_ip, c_gps) override replacing the stream-derived cost model.
    #[serde(default)]
    pub cost_override: Option<(f64, f64)>,
    /// Win-rate range override for this scenario.
    #[serde(default)]
    pub win_rate: Option<(f64, f64)>,
}

/// The whole simulation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_duration_days")]
    pub duration_days: (u32, u32),
    #[serde(default = "default_win_rate")]
    pub win_rate: (f64, f64),
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub db_side: DbSide,
    pub scenarios: Vec<ScenarioSpec>,
}

/// One executed campaign with its scenario coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignRecord {
    pub scenario: usize,
    pub country: String,
    pub urbanization: Option<Urbanization>,
    pub target: String,
    pub repetition: u32,
    pub duration_days: u32,
    pub result: CampaignResult,
}

/// A Tab-shaped decision row: how many campaigns of a slice chose each
/// strategy. Campaigns that delivered nothing are flagged under the
/// strategy value "empty".
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecisionRow {
    pub country: String,
    pub level: u8,
    pub mode: Mode,
    pub strategy: String,
    pub count: usize,
}

#[derive(Debug, Serialize)]
pub struct BatchResult {
    pub campaigns: Vec<CampaignRecord>,
    pub table: Vec<DecisionRow>,
}

fn keyed_rng(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&c.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Smallest window containing every bid.
pub fn bid_window(bids: &[EnrichedBid]) -> Option<TimeWindow> {
    let from = bids.iter().map(|b| b.timestamp).min()?;
    let to = bids.iter().map(|b| b.timestamp).max()? + 1;
    Some(TimeWindow { from, to })
}

fn qualifying_targets(
    scenario: &ScenarioSpec,
    scenario_idx: usize,
    regions: &RegionIndex,
    urbanization: &UrbanizationMap,
    seed: u64,
) -> Result<Vec<String>, CampaignError> {
    if let Some(ids) = &scenario.target_ids {
        for id in ids {
            let known = regions
                .regions_at_level(scenario.level)
                .any(|r| r.id == *id && r.country == scenario.country);
            if !known {
                return Err(CampaignError::UnknownTarget {
                    scenario: scenario_idx,
                    id: id.clone(),
                });
            }
        }
        return Ok(ids.clone());
    }

    let mut pool: Vec<String> = regions
        .regions_at_level(scenario.level)
        .filter(|r| r.country == scenario.country)
        .filter(|r| match scenario.urbanization {
            None => true,
            Some(class) => {
                let (lat_min, lat_max, lon_min, lon_max) = r.bounding_box();
                let center = GeoPoint {
                    lat: (lat_min + lat_max) / 2.0,
                    lon: (lon_min + lon_max) / 2.0,
                };
                urbanization.classify(center) == class
            }
        })
        .map(|r| r.id.clone())
        .collect();
    pool.sort();
    if pool.is_empty() {
        return Err(CampaignError::NoQualifyingTargets {
            scenario: scenario_idx,
            level: scenario.level,
            country: scenario.country.clone(),
        });
    }
    if pool.len() <= scenario.targets {
        return Ok(pool);
    }
    let mut rng = keyed_rng(seed, scenario_idx as u64, u64::MAX, 0);
    let mut picks = rand::seq::index::sample(&mut rng, pool.len(), scenario.targets).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}

/// Run every (scenario, target, repetition, mode) combination. Each
/// campaign draws its duration, window offset, and win rate from an rng
/// keyed by (seed, scenario, target, repetition), so results do not depend
/// on execution order or thread count.
pub fn batch_simulate(
    config: &BatchConfig,
    bids: &[EnrichedBid],
    default_costs: &CostModel,
    regions: &RegionIndex,
    urbanization: &UrbanizationMap,
    anchor_index: Option<&NearestAnchorIndex>,
) -> Result<BatchResult, CampaignError> {
    let stream_window = bid_window(bids).ok_or(CampaignError::EmptyBidStream)?;

    struct Task {
        scenario_idx: usize,
        target_idx: usize,
        target: String,
        repetition: u32,
        mode: Mode,
        costs: CostModel,
        country: String,
        urbanization: Option<Urbanization>,
        level: u8,
        win_rate_range: (f64, f64),
    }

    let mut tasks = Vec::new();
    for (scenario_idx, scenario) in config.scenarios.iter().enumerate() {
        let costs = match scenario.cost_override {
            Some((c_ip, c_gps)) => CostModel::from_raw(c_ip, c_gps)?,
            None => *default_costs,
        };
        let targets =
            qualifying_targets(scenario, scenario_idx, regions, urbanization, config.seed)?;
        for (target_idx, target) in targets.iter().enumerate() {
            for repetition in 0..config.repetitions {
                for &mode in &config.modes {
                    tasks.push(Task {
                        scenario_idx,
                        target_idx,
                        target: target.clone(),
                        repetition,
                        mode,
                        costs,
                        country: scenario.country.clone(),
                        urbanization: scenario.urbanization,
                        level: scenario.level,
                        win_rate_range: scenario.win_rate.unwrap_or(config.win_rate),
                    });
                }
            }
        }
    }

    let campaigns: Vec<CampaignRecord> = tasks
        .par_iter()
        .map(|task| -> Result<CampaignRecord, CampaignError> {
            // The parameter draw is independent of mode so actual and
            // optimal runs of a repetition see the same campaign.
            let mut rng = keyed_rng(
                config.seed,
                task.scenario_idx as u64,
                task.target_idx as u64,
                task.repetition as u64,
            );
            let (dur_lo, dur_hi) = config.duration_days;
            let duration_days = rng.random_range(dur_lo..=dur_hi.max(dur_lo));
            let duration_secs = duration_days as Timestamp * 86_400;
            let span = stream_window.to - stream_window.from;
            let (start, duration_secs) = if duration_secs >= span {
                (stream_window.from, span)
            } else {
                (
                    stream_window.from + rng.random_range(0..=(span - duration_secs)),
                    duration_secs,
                )
            };
            let (wr_lo, wr_hi) = task.win_rate_range;
            let win_rate = rng.random_range(wr_lo..=wr_hi.max(wr_lo));
            let delivery_seed = rng.random::<u64>();

            let spec = CampaignSpec {
                target_region_id: task.target.clone(),
                level: task.level,
                window: TimeWindow {
                    from: start,
                    to: start + duration_secs,
                },
                win_rate,
                mode: task.mode,
                db_side: config.db_side,
                rng_seed: delivery_seed,
            };
            let result = run_campaign(&spec, bids, &task.costs, regions, anchor_index)?;
            Ok(CampaignRecord {
                scenario: task.scenario_idx,
                country: task.country.clone(),
                urbanization: task.urbanization,
                target: task.target.clone(),
                repetition: task.repetition,
                duration_days,
                result,
            })
        })
        .collect::<Result<_, _>>()?;

    let table = decision_table(&campaigns);
    Ok(BatchResult { campaigns, table })
}

/// Aggregate per-campaign strategies into (country, level, mode) rows.
pub fn decision_table(campaigns: &[CampaignRecord]) -> Vec<DecisionRow> {
    let mut counts: BTreeMap<(String, u8, &'static str, String), usize> = BTreeMap::new();
    for c in campaigns {
        let strategy = match c.result.strategy {
            Some(s) => s.as_str().to_string(),
            None => "empty".to_string(),
        };
        let key = (
            c.country.clone(),
            c.result.spec.level,
            c.result.spec.mode.as_str(),
            strategy,
        );
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|((country, level, mode, strategy), count)| DecisionRow {
            country,
            level,
            mode: if mode == "actual" {
                Mode::Actual
            } else {
                Mode::Optimal
            },
            strategy,
            count,
        })
        .collect()
}

/// Decision table CSV: `country,level,mode,strategy,count`.
pub fn write_decision_table<W: Write>(rows: &[DecisionRow], sink: W) -> Result<(), CampaignError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["country", "level", "mode", "strategy", "count"])?;
    for row in rows {
        writer.write_record([
            row.country.clone(),
            row.level.to_string(),
            row.mode.as_str().to_string(),
            row.strategy.clone(),
            row.count.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{rect_region, RegionIndex};
    use proptest::prelude::*;
    // The explicit import outranks proptest's glob-exported Strategy trait.
    use super::Strategy;

    #[test]
    fn decision_toy_examples() {
        // 20% accuracy, GPS twice the cost: GeoIP needs five impressions
        // per hit, so GPS wins.
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let e = decide(0.2, &costs);
        assert_eq!(e.phi_ip, 5.0);
        assert_eq!(e.phi_gps, 2.0);
        assert_eq!(e.strategy, Strategy::Gps);

        // Same accuracy but GPS six times the cost: GeoIP wins.
        let costs = CostModel::from_raw(1.0, 6.0).unwrap();
        let e = decide(0.2, &costs);
        assert_eq!(e.phi_ip, 5.0);
        assert_eq!(e.phi_gps, 6.0);
        assert_eq!(e.strategy, Strategy::Geoip);
        assert!((e.gain - (6.0f64 / 5.0).log10()).abs() < 1e-12);
    }

    #[test]
    fn decision_ties_go_to_gps() {
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let e = decide(0.5, &costs);
        assert_eq!(e.phi_ip, e.phi_gps);
        assert_eq!(e.gain, 0.0);
        assert_eq!(e.strategy, Strategy::Gps);
    }

    #[test]
    fn zero_accuracy_yields_sentinels() {
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let e = decide(0.0, &costs);
        assert!(e.phi_ip.is_infinite());
        assert_eq!(e.strategy, Strategy::Gps);
        assert_eq!(e.gain, f64::NEG_INFINITY);
    }

    fn bid(ts: Timestamp, source: LocSource, pos: Option<(f64, f64)>, floor: f64) -> BidRequest {
        BidRequest {
            timestamp: ts,
            ip: IpAddress(0x01000000 + ts as u32),
            loc_source: source,
            pos: pos.map(|(lat, lon)| GeoPoint { lat, lon }),
            bid_floor: floor,
        }
    }

    #[test]
    fn normalized_costs_arithmetic() {
        let bids = vec![
            bid(1, LocSource::Geoip, None, 1.0),
            bid(2, LocSource::Gps, Some((40.0, -3.0)), 2.0),
        ];
        let costs = normalized_costs(&bids).unwrap();
        assert_eq!((costs.c_star_ip, costs.c_star_gps), (1.0, 2.0));

        let equal = vec![
            bid(1, LocSource::Geoip, None, 3.0),
            bid(2, LocSource::Gps, Some((40.0, -3.0)), 3.0),
        ];
        let costs = normalized_costs(&equal).unwrap();
        assert_eq!((costs.c_star_ip, costs.c_star_gps), (1.0, 1.0));
    }

    #[test]
    fn missing_source_is_named() {
        let bids = vec![bid(1, LocSource::Geoip, None, 1.0)];
        match normalized_costs(&bids).unwrap_err() {
            CampaignError::MissingSource(LocSource::Gps) => {}
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bids_round_trip_and_gps_requires_position() {
        let bids = vec![
            bid(1, LocSource::Gps, Some((40.0, -3.0)), 1.5),
            bid(2, LocSource::Unavailable, None, 0.25),
        ];
        let mut buf = Vec::new();
        write_bids(&bids, &mut buf).unwrap();
        let reread = parse_bids(buf.as_slice(), 0.0).unwrap();
        assert_eq!(reread.bids, bids);

        let bad = "timestamp,ip,loc_source,lat,lon,bid_floor\n5,1.0.0.1,gps,,,1.0\n";
        let res = parse_bids(bad.as_bytes(), 1.0).unwrap();
        assert!(res.bids.is_empty());
        assert!(res.rejects[0].1.contains("gps bid without coordinates"));
    }

    fn enriched(ts: Timestamp, gt: (f64, f64), ip_a: Option<(f64, f64)>) -> EnrichedBid {
        EnrichedBid {
            timestamp: ts,
            ip: IpAddress(0x01000000),
            pos_gt: GeoPoint {
                lat: gt.0,
                lon: gt.1,
            },
            pos_ip_a: ip_a.map(|(lat, lon)| GeoPoint { lat, lon }),
            pos_ip_b: None,
            bid_floor: 1.0,
        }
    }

    fn target_regions() -> RegionIndex {
        RegionIndex::build(
            vec![
                rect_region("in", 2, "ES", 0.0, 10.0, 0.0, 10.0),
                rect_region("out", 2, "ES", 0.0, 10.0, 10.0, 20.0),
            ],
            4,
        )
        .unwrap()
    }

    fn spec(win_rate: f64) -> CampaignSpec {
        CampaignSpec {
            target_region_id: "in".to_string(),
            level: 2,
            window: TimeWindow { from: 0, to: 100 },
            win_rate,
            mode: Mode::Actual,
            db_side: DbSide::A,
            rng_seed: 7,
        }
    }

    #[test]
    fn campaign_counts_and_accuracy() {
        let regions = target_regions();
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        // Five candidates claimed in-target, one of them truly in-target.
        let mut bids: Vec<EnrichedBid> = (0..4)
            .map(|i| enriched(i, (5.0, 15.0), Some((5.0, 5.0))))
            .collect();
        bids.push(enriched(4, (5.0, 5.0), Some((5.0, 5.0))));
        // Noise: out-of-window, missing side, claimed off-target.
        bids.push(enriched(500, (5.0, 5.0), Some((5.0, 5.0))));
        bids.push(enriched(5, (5.0, 5.0), None));
        bids.push(enriched(6, (5.0, 5.0), Some((5.0, 15.0))));

        let result = run_campaign(&spec(1.0), &bids, &costs, &regions, None).unwrap();
        assert_eq!(result.candidate_count, 5);
        assert_eq!(result.delivered_count, 5);
        assert_eq!(result.a_ip, Some(0.2));
        assert_eq!(result.phi_ip, Some(5.0));
        assert_eq!(result.strategy, Some(Strategy::Gps));
    }

    #[test]
    fn empty_campaign_has_absent_accuracy() {
        let regions = target_regions();
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let bids = vec![enriched(1, (5.0, 5.0), Some((5.0, 15.0)))];
        let result = run_campaign(&spec(0.9), &bids, &costs, &regions, None).unwrap();
        assert_eq!(result.candidate_count, 0);
        assert_eq!(result.a_ip, None);
        assert_eq!(result.strategy, None);
    }

    #[test]
    fn same_seed_reproduces_delivery() {
        let regions = target_regions();
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let bids: Vec<EnrichedBid> = (0..50)
            .map(|i| {
                enriched(
                    i,
                    (if i % 3 == 0 { 5.0 } else { -5.0 }, 5.0),
                    Some((5.0, 5.0)),
                )
            })
            .collect();
        let a = run_campaign(&spec(0.3), &bids, &costs, &regions, None).unwrap();
        let b = run_campaign(&spec(0.3), &bids, &costs, &regions, None).unwrap();
        assert_eq!(a.on_target_count, b.on_target_count);
        assert_eq!(a.a_ip, b.a_ip);
        assert_eq!(a.delivered_count, 15);
    }

    #[test]
    fn all_off_target_delivery_yields_sentinels() {
        let regions = target_regions();
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        // Claimed in-target by IP, but nobody truly there.
        let bids: Vec<EnrichedBid> = (0..10)
            .map(|i| enriched(i, (5.0, 15.0), Some((5.0, 5.0))))
            .collect();
        let result = run_campaign(&spec(1.0), &bids, &costs, &regions, None).unwrap();
        assert_eq!(result.a_ip, Some(0.0));
        assert_eq!(result.phi_ip, Some(f64::INFINITY));
        assert_eq!(result.gain, Some(f64::NEG_INFINITY));
        assert_eq!(result.strategy, Some(Strategy::Gps));
    }

    fn batch_fixture() -> (RegionIndex, Vec<EnrichedBid>, CostModel) {
        let mut regions = Vec::new();
        for i in 0..6 {
            let w = i as f64 * 2.0;
            regions.push(rect_region(
                &format!("t{i}"),
                3,
                "ES",
                0.0,
                10.0,
                w,
                w + 2.0,
            ));
        }
        let index = RegionIndex::build(regions, 4).unwrap();
        let mut bids = Vec::new();
        for i in 0..600i64 {
            let lon = (i % 12) as f64 + 0.5;
            let on_target = i % 3 == 0;
            let gt_lon = if on_target { lon } else { (lon + 6.0) % 12.0 };
            bids.push(EnrichedBid {
                timestamp: i * 3600,
                ip: IpAddress(0x0b000000 + i as u32),
                pos_gt: GeoPoint {
                    lat: 5.0,
                    lon: gt_lon,
                },
                pos_ip_a: Some(GeoPoint { lat: 5.0, lon }),
                pos_ip_b: None,
                bid_floor: 1.0,
            });
        }
        (index, bids, CostModel::from_raw(1.0, 2.0).unwrap())
    }

    #[test]
    fn batch_runs_targets_times_repetitions_campaigns() {
        let (regions, bids, costs) = batch_fixture();
        let config = BatchConfig {
            seed: 9,
            repetitions: 3,
            duration_days: (1, 2),
            win_rate: (0.2, 0.4),
            modes: vec![Mode::Actual],
            db_side: DbSide::A,
            scenarios: vec![ScenarioSpec {
                country: "ES".to_string(),
                level: 3,
                urbanization: None,
                targets: 5,
                target_ids: None,
                cost_override: None,
                win_rate: None,
            }],
        };
        let urb = crate::events::UrbanizationMap::empty();
        let result = batch_simulate(&config, &bids, &costs, &regions, &urb, None).unwrap();
        assert_eq!(result.campaigns.len(), 15, "5 targets x 3 repetitions");

        let again = batch_simulate(&config, &bids, &costs, &regions, &urb, None).unwrap();
        assert_eq!(
            serde_json::to_string(&result.campaigns).unwrap(),
            serde_json::to_string(&again.campaigns).unwrap(),
            "same seed must reproduce byte-identical campaigns"
        );

        // Strategy counts must equal a recount from each campaign's
        // effective costs.
        let mut recount: std::collections::BTreeMap<String, usize> = Default::default();
        for c in &result.campaigns {
            let strategy = match (c.result.phi_ip, c.result.phi_gps) {
                (None, _) => "empty".to_string(),
                (Some(ip), gps) if ip < gps => "geoip".to_string(),
                _ => "gps".to_string(),
            };
            *recount.entry(strategy).or_insert(0) += 1;
        }
        for row in &result.table {
            assert_eq!(
                recount.get(&row.strategy).copied().unwrap_or(0),
                row.count,
                "{row:?}"
            );
        }
        assert_eq!(result.table.iter().map(|r| r.count).sum::<usize>(), 15);
    }

    #[test]
    fn optimal_mode_requires_index() {
        let regions = target_regions();
        let costs = CostModel::from_raw(1.0, 2.0).unwrap();
        let mut s = spec(0.5);
        s.mode = Mode::Optimal;
        let err = run_campaign(&s, &[], &costs, &regions, None).unwrap_err();
        assert!(matches!(err, CampaignError::MissingAnchorIndex));
    }

    #[test]
    fn enrichment_keeps_only_gps_bids() {
        use crate::ip::{GeoIpSnapshot, IpRange, SnapshotSeries};
        let range = IpRange {
            start: IpAddress(0x01000000),
            end: IpAddress(0x0100000F),
            anchor: GeoPoint { lat: 5.0, lon: 5.0 },
            conn_type: crate::ip::ConnType::Fixed,
        };
        let snap =
            GeoIpSnapshot::from_ranges(vec![range], "a", TimeWindow { from: 0, to: 100 }).unwrap();
        let series = SnapshotSeries::new("a", vec![snap]).unwrap();

        let mut bids: Vec<BidRequest> = Vec::new();
        for i in 0..4 {
            bids.push(bid(i, LocSource::Gps, Some((5.0, 5.0)), 1.0));
        }
        for i in 4..10 {
            bids.push(bid(i, LocSource::Geoip, None, 1.0));
        }
        // A gps bid whose IP misses the snapshot keeps absent fields.
        bids.push(BidRequest {
            timestamp: 5,
            ip: IpAddress(0x09090909),
            loc_source: LocSource::Gps,
            pos: Some(GeoPoint { lat: 1.0, lon: 1.0 }),
            bid_floor: 1.0,
        });

        let result = build_ground_truth_bids(&bids, &series, None);
        assert_eq!(result.enriched.len(), 5);
        assert_eq!(result.dropped_by_source["geoip"], 6);
        let missing = &result.enriched[4];
        assert!(missing.pos_ip_a.is_none() && missing.pos_ip_b.is_none());
        assert_eq!(
            result.enriched[0].pos_ip_a,
            Some(GeoPoint { lat: 5.0, lon: 5.0 })
        );
    }

    proptest! {
        #[test]
        fn strategy_is_scale_invariant_under_power_of_two(
            c_ip in 0.01f64..100.0,
            c_gps in 0.01f64..100.0,
            a_ip in 0.0f64..1.0,
            exp in -8i32..8,
        ) {
            let k = 2f64.powi(exp);
            let base = CostModel::from_raw(c_ip, c_gps).unwrap();
            let scaled = CostModel::from_raw(c_ip * k, c_gps * k).unwrap();
            prop_assert_eq!(base.c_star_ip, scaled.c_star_ip);
            prop_assert_eq!(base.c_star_gps, scaled.c_star_gps);
            let eb = decide(a_ip, &base);
            let es = decide(a_ip, &scaled);
            prop_assert_eq!(eb, es);
        }

        #[test]
        fn gain_sign_matches_strategy(c_ip in 0.01f64..10.0, c_gps in 0.01f64..10.0, a_ip in 0.001f64..1.0) {
            let costs = CostModel::from_raw(c_ip, c_gps).unwrap();
            let e = decide(a_ip, &costs);
            prop_assert_eq!(e.gain > 0.0, e.strategy == Strategy::Geoip);
            if e.gain < 0.0 {
                prop_assert_eq!(e.strategy, Strategy::Gps);
            }
            // With perfect accuracy the gain is capped by the price gap.
            let perfect = decide(1.0, &costs);
            prop_assert!(perfect.gain <= costs.c_star_gps.log10() + 1e-12);
        }

        #[test]
        fn accuracy_is_a_fraction_and_seeded(
            seed in 0u64..500,
            win_rate in 0.05f64..1.0,
            n_bids in 1usize..80,
        ) {
            let regions = target_regions();
            let costs = CostModel::from_raw(1.0, 2.0).unwrap();
            let bids: Vec<EnrichedBid> = (0..n_bids as i64)
                .map(|i| enriched(i, (if i % 2 == 0 { 5.0 } else { -5.0 }, 5.0), Some((5.0, 5.0))))
                .collect();
            let mut s = spec(win_rate);
            s.rng_seed = seed;
            s.window = TimeWindow { from: 0, to: n_bids as i64 + 1 };
            let a = run_campaign(&s, &bids, &costs, &regions, None).unwrap();
            let b = run_campaign(&s, &bids, &costs, &regions, None).unwrap();
            if let Some(acc) = a.a_ip {
                prop_assert!((0.0..=1.0).contains(&acc));
            }
            prop_assert_eq!(a.a_ip, b.a_ip);
            prop_assert_eq!(a.delivered_count, (win_rate * a.candidate_count as f64).floor() as usize);
        }
    }
}

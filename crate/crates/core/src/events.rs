//! Ground-truth event ingestion and the event-to-snapshot join that
//! produces analysis-ready samples.

use crate::geo::{cell_of, haversine_km, CellId, GeoError, GeoPoint};
use crate::ip::{ConnType, IpAddress, SnapshotSeries};
use crate::region::{RegionError, RegionIndex};
use crate::{TimeWindow, Timestamp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("events header must be timestamp,lat,lon,ip,carrier,country, got {0:?}")]
    BadHeader(String),
    #[error(
        "too many invalid records: {invalid} of {total} ({frac:.3}%) exceeds {threshold:.3}%; \
         reasons: {summary}"
    )]
    TooManyInvalid {
        invalid: usize,
        total: usize,
        frac: f64,
        threshold: f64,
        summary: String,
    },
    #[error("urbanization line {line}: {reason}")]
    BadUrbanizationRow { line: u64, reason: String },
    #[error("urbanization file mixes grid resolutions {a} and {b}")]
    MixedResolutions { a: u8, b: u8 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum JoinError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// One ground-truth observation: where a device really was, and the IP
/// address it was using at that moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEvent {
    pub timestamp: Timestamp,
    pub pos_gt: GeoPoint,
    pub ip: IpAddress,
    pub carrier: String,
    pub country: String,
}

/// Normalize noisy carrier strings before they become group keys.
pub fn normalize_carrier(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectedRecord {
    pub line: u64,
    pub reason: String,
}

/// Outcome of ingesting an events file.
#[derive(Debug)]
pub struct IngestResult {
    pub events: Vec<LocationEvent>,
    pub rejects: Vec<RejectedRecord>,
    pub total_records: usize,
}

impl IngestResult {
    pub fn reject_summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejects {
            *out.entry(r.reason.clone()).or_insert(0) += 1;
        }
        out
    }
}

pub const EVENTS_HEADER: [&str; 6] = ["timestamp", "lat", "lon", "ip", "carrier", "country"];

fn geo_reason(err: GeoError) -> String {
    match err {
        GeoError::LatOutOfRange(v) => format!("lat out of range: {v}"),
        GeoError::LonOutOfRange(v) => format!("lon out of range: {v}"),
        other => other.to_string(),
    }
}

/// Ingest `timestamp,lat,lon,ip,carrier,country` records. Invalid records
/// are counted and reported; if their fraction exceeds
/// `max_invalid_fraction` the whole ingest aborts with a reason summary.
/// When `window` is given, events outside it are rejected.
pub fn ingest_events<R: Read>(
    source: R,
    max_invalid_fraction: f64,
    window: Option<TimeWindow>,
) -> Result<IngestResult, EventError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);

    let header = reader.headers()?.clone();
    if header.iter().ne(EVENTS_HEADER) {
        return Err(EventError::BadHeader(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }

    let mut events = Vec::new();
    let mut rejects = Vec::new();
    let mut total = 0usize;
    for record in reader.records() {
        let record = record?;
        total += 1;
        let line = record.position().map_or(0, |p| p.line());
        let mut reject = |reason: String| rejects.push(RejectedRecord { line, reason });

        if record.len() != EVENTS_HEADER.len() {
            reject(format!(
                "expected {} fields, got {}",
                EVENTS_HEADER.len(),
                record.len()
            ));
            continue;
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let timestamp: Timestamp = match field(0).parse() {
            Ok(t) => t,
            Err(_) => {
                reject(format!("bad timestamp {:?}", field(0)));
                continue;
            }
        };
        let lat: f64 = match field(1).parse() {
            Ok(v) => v,
            Err(_) => {
                reject(format!("bad lat {:?}", field(1)));
                continue;
            }
        };
        let lon: f64 = match field(2).parse() {
            Ok(v) => v,
            Err(_) => {
                reject(format!("bad lon {:?}", field(2)));
                continue;
            }
        };
        let pos_gt = match GeoPoint::new(lat, lon) {
            Ok(p) => p,
            Err(e) => {
                reject(geo_reason(e));
                continue;
            }
        };
        let ip: IpAddress = match field(3).parse() {
            Ok(ip) => ip,
            Err(reason) => {
                reject(format!("bad ip {:?}: {reason}", field(3)));
                continue;
            }
        };
        if let Some(w) = window {
            if !w.contains(timestamp) {
                reject(format!(
                    "timestamp {timestamp} outside study window [{},{})",
                    w.from, w.to
                ));
                continue;
            }
        }
        events.push(LocationEvent {
            timestamp,
            pos_gt,
            ip,
            carrier: normalize_carrier(field(4)),
            country: field(5).to_string(),
        });
    }

    if total > 0 {
        let frac = rejects.len() as f64 / total as f64;
        if frac > max_invalid_fraction {
            let summary = {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for r in &rejects {
                    *counts.entry(r.reason.as_str()).or_insert(0) += 1;
                }
                counts
                    .iter()
                    .map(|(reason, n)| format!("{reason} x{n}"))
                    .collect::<Vec<_>>()
                    .join("; ")
            };
            return Err(EventError::TooManyInvalid {
                invalid: rejects.len(),
                total,
                frac: frac * 100.0,
                threshold: max_invalid_fraction * 100.0,
                summary,
            });
        }
    }

    Ok(IngestResult {
        events,
        rejects,
        total_records: total,
    })
}

/// Write events in the format `ingest_events` reads.
pub fn write_events<W: Write>(events: &[LocationEvent], sink: W) -> Result<(), EventError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(EVENTS_HEADER)?;
    for e in events {
        writer.write_record([
            e.timestamp.to_string(),
            e.pos_gt.lat.to_string(),
            e.pos_gt.lon.to_string(),
            e.ip.to_string(),
            e.carrier.clone(),
            e.country.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Urban / semi-urban / rural classification of an area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Urbanization {
    Urban,
    SemiUrban,
    Rural,
    Unknown,
}

impl Urbanization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Urbanization::Urban => "urban",
            Urbanization::SemiUrban => "semi_urban",
            Urbanization::Rural => "rural",
            Urbanization::Unknown => "unknown",
        }
    }
}

impl FromStr for Urbanization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "urban" => Ok(Urbanization::Urban),
            "semi_urban" => Ok(Urbanization::SemiUrban),
            "rural" => Ok(Urbanization::Rural),
            "unknown" => Ok(Urbanization::Unknown),
            other => Err(format!("unknown urbanization class {other:?}")),
        }
    }
}

/// Cell-keyed urbanization classes at one grid resolution. Lookups outside
/// the ingested cells are `Unknown`.
#[derive(Debug, Clone, Default)]
pub struct UrbanizationMap {
    resolution: Option<u8>,
    cells: HashMap<u64, Urbanization>,
}

impl UrbanizationMap {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_cells(
        cells: impl IntoIterator<Item = (CellId, Urbanization)>,
    ) -> Result<Self, EventError> {
        let mut map = UrbanizationMap::default();
        for (cell, class) in cells {
            match map.resolution {
                None => map.resolution = Some(cell.resolution),
                Some(r) if r != cell.resolution => {
                    return Err(EventError::MixedResolutions {
                        a: r,
                        b: cell.resolution,
                    });
                }
                _ => {}
            }
            map.cells.insert(cell.index, class);
        }
        Ok(map)
    }

    /// Read `cell_id,class` records.
    pub fn from_reader<R: Read>(source: R) -> Result<Self, EventError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(source);
        let mut pairs = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let cell: CellId = record.get(0).unwrap_or("").parse().map_err(|e: GeoError| {
                EventError::BadUrbanizationRow {
                    line,
                    reason: e.to_string(),
                }
            })?;
            let class: Urbanization = record
                .get(1)
                .unwrap_or("")
                .parse()
                .map_err(|reason| EventError::BadUrbanizationRow { line, reason })?;
            pairs.push((cell, class));
        }
        Self::from_cells(pairs)
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<(), EventError> {
        let mut writer = csv::Writer::from_writer(sink);
        writer.write_record(["cell_id", "class"])?;
        let res = match self.resolution {
            Some(r) => r,
            None => return Ok(writer.flush()?),
        };
        let mut indices: Vec<u64> = self.cells.keys().copied().collect();
        indices.sort_unstable();
        for index in indices {
            let cell = CellId {
                resolution: res,
                index,
            };
            writer.write_record([cell.to_string(), self.cells[&index].as_str().to_string()])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn classify(&self, p: GeoPoint) -> Urbanization {
        let res = match self.resolution {
            Some(r) => r,
            None => return Urbanization::Unknown,
        };
        match cell_of(p, res) {
            Ok(cell) => self
                .cells
                .get(&cell.index)
                .copied()
                .unwrap_or(Urbanization::Unknown),
            Err(_) => Urbanization::Unknown,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Region id per administrative level, `None` where the point falls in no
/// region of that level.
pub type RegionsByLevel = BTreeMap<u8, Option<String>>;

/// A ground-truth event joined with its snapshot-resolved anchor and every
/// label the breakdowns group by.
#[derive(Debug, Clone)]
pub struct JoinedSample {
    pub event: LocationEvent,
    pub pos_ip: GeoPoint,
    pub error_km: f64,
    pub conn_type: ConnType,
    pub urbanization: Urbanization,
    pub gt_region_by_level: RegionsByLevel,
    pub ip_region_by_level: RegionsByLevel,
}

/// Why an event could not be joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedReason {
    NoSnapshotForTimestamp,
    IpNotInSnapshot,
}

impl UnmatchedReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnmatchedReason::NoSnapshotForTimestamp => "no_snapshot_for_timestamp",
            UnmatchedReason::IpNotInSnapshot => "ip_not_in_snapshot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnmatchedEvent {
    pub event: LocationEvent,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Default)]
pub struct JoinOutput {
    pub samples: Vec<JoinedSample>,
    pub unmatched: Vec<UnmatchedEvent>,
}

enum JoinOutcome {
    Matched(Box<JoinedSample>),
    Unmatched(UnmatchedReason),
}

fn regions_of(
    regions: &RegionIndex,
    p: GeoPoint,
    levels: &[u8],
) -> Result<RegionsByLevel, RegionError> {
    let mut out = BTreeMap::new();
    for &level in levels {
        out.insert(level, regions.region_of(p, level)?.map(str::to_string));
    }
    Ok(out)
}

/// Join events against the time-matched snapshot. Events whose timestamp
/// has no covering snapshot or whose IP hits no range go to the unmatched
/// sink; everything else becomes a fully labeled sample. Matched plus
/// unmatched always equals the input count.
pub fn join(
    events: &[LocationEvent],
    series: &SnapshotSeries,
    urbanization: &UrbanizationMap,
    regions: &RegionIndex,
    levels: &[u8],
) -> Result<JoinOutput, JoinError> {
    let outcomes: Vec<JoinOutcome> = events
        .par_iter()
        .map(|event| -> Result<JoinOutcome, JoinError> {
            let snapshot = match series.snapshot_at(event.timestamp) {
                Ok(s) => s,
                Err(_) => {
                    return Ok(JoinOutcome::Unmatched(
                        UnmatchedReason::NoSnapshotForTimestamp,
                    ))
                }
            };
            let range = match snapshot.lookup(event.ip) {
                Some(r) => r,
                None => return Ok(JoinOutcome::Unmatched(UnmatchedReason::IpNotInSnapshot)),
            };
            let pos_ip = range.anchor;
            let sample = JoinedSample {
                event: event.clone(),
                pos_ip,
                error_km: haversine_km(event.pos_gt, pos_ip),
                conn_type: range.conn_type,
                urbanization: urbanization.classify(event.pos_gt),
                gt_region_by_level: regions_of(regions, event.pos_gt, levels)?,
                ip_region_by_level: regions_of(regions, pos_ip, levels)?,
            };
            Ok(JoinOutcome::Matched(Box::new(sample)))
        })
        .collect::<Result<_, _>>()?;

    let mut output = JoinOutput::default();
    for (event, outcome) in events.iter().zip(outcomes) {
        match outcome {
            JoinOutcome::Matched(sample) => output.samples.push(*sample),
            JoinOutcome::Unmatched(reason) => {
                output.unmatched.push(UnmatchedEvent {
                    event: event.clone(),
                    reason,
                });
            }
        }
    }
    Ok(output)
}

/// Unmatched sink: events schema plus a `reason` column.
pub fn write_unmatched<W: Write>(unmatched: &[UnmatchedEvent], sink: W) -> Result<(), EventError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record([
        "timestamp",
        "lat",
        "lon",
        "ip",
        "carrier",
        "country",
        "reason",
    ])?;
    for u in unmatched {
        let e = &u.event;
        writer.write_record([
            e.timestamp.to_string(),
            e.pos_gt.lat.to_string(),
            e.pos_gt.lon.to_string(),
            e.ip.to_string(),
            e.carrier.clone(),
            e.country.clone(),
            u.reason.as_str().to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

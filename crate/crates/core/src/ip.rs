//! IPv4 range snapshots: parsing, point lookups, anchor extraction, and
//! time-windowed snapshot series.

use crate::geo::{GeoError, GeoPoint};
use crate::{TimeWindow, Timestamp};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("line {line}: bad IP address {value:?}: {reason}")]
    BadIp {
        line: u64,
        value: String,
        reason: String,
    },
    #[error("line {line}: bad coordinate: {source}")]
    BadCoordinate { line: u64, source: GeoError },
    #[error("line {line}: bad numeric field {value:?}")]
    BadNumber { line: u64, value: String },
    #[error("line {line}: unknown connection type {value:?}, expected fixed|cellular|unknown")]
    BadConnType { line: u64, value: String },
    #[error("line {line}: range start {start} exceeds end {end}")]
    ReversedRange {
        line: u64,
        start: IpAddress,
        end: IpAddress,
    },
    #[error("overlapping ranges {first} and {second}")]
    Overlap { first: String, second: String },
    #[error("snapshot header must be start_ip,end_ip,lat,lon,conn_type, got {0:?}")]
    BadHeader(String),
    #[error("snapshot has no ranges")]
    EmptySnapshot,
    #[error("snapshot window is empty: valid_from {from} must precede valid_to {to}")]
    BadWindow { from: Timestamp, to: Timestamp },
    #[error("snapshot series is empty")]
    EmptySeries,
    #[error("snapshot windows [{a_from},{a_to}) and [{b_from},{b_to}) overlap")]
    OverlappingWindows {
        a_from: Timestamp,
        a_to: Timestamp,
        b_from: Timestamp,
        b_to: Timestamp,
    },
    #[error("no snapshot covers t={t}; nearest window is [{nearest_from},{nearest_to})")]
    NoCoverage {
        t: Timestamp,
        nearest_from: Timestamp,
        nearest_to: Timestamp,
    },
    #[error("snapshot index line {line}: {reason}")]
    BadIndexRow { line: u64, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// An IPv4 address held in host order. IPv6 is rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IpAddress(pub u32);

impl FromStr for IpAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.contains(':') {
            return Err("IPv6 is not supported, expected an IPv4 dotted quad".to_string());
        }
        let v4: Ipv4Addr = s.parse().map_err(|e| format!("{e}"))?;
        Ok(IpAddress(u32::from(v4)))
    }
}

impl fmt::Display for IpAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Ipv4Addr::from(self.0))
    }
}

/// Access technology tag carried by each range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnType {
    Fixed,
    Cellular,
    Unknown,
}

impl ConnType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConnType::Fixed => "fixed",
            ConnType::Cellular => "cellular",
            ConnType::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ConnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConnType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(ConnType::Fixed),
            "cellular" => Ok(ConnType::Cellular),
            "unknown" => Ok(ConnType::Unknown),
            other => Err(format!("unknown conn_type {other:?}")),
        }
    }
}

/// A contiguous IPv4 range mapped to one anchor coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpRange {
    pub start: IpAddress,
    pub end: IpAddress,
    pub anchor: GeoPoint,
    pub conn_type: ConnType,
}

impl IpRange {
    pub fn contains(&self, ip: IpAddress) -> bool {
        self.start <= ip && ip <= self.end
    }

    fn describe(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

/// A validated database snapshot: sorted, non-overlapping ranges valid
/// over a half-open time window.
#[derive(Debug, Clone)]
pub struct GeoIpSnapshot {
    ranges: Vec<IpRange>,
    pub valid_from: Timestamp,
    pub valid_to: Timestamp,
    pub provider_id: String,
}

impl GeoIpSnapshot {
    /// Validate and adopt a set of ranges: sorts by start address and
    /// rejects any overlap, which would make lookups ambiguous.
    pub fn from_ranges(
        mut ranges: Vec<IpRange>,
        provider_id: &str,
        window: TimeWindow,
    ) -> Result<Self, SnapshotError> {
        if window.from >= window.to {
            return Err(SnapshotError::BadWindow {
                from: window.from,
                to: window.to,
            });
        }
        ranges.sort_by_key(|r| r.start);
        for pair in ranges.windows(2) {
            if pair[0].end >= pair[1].start {
                return Err(SnapshotError::Overlap {
                    first: pair[0].describe(),
                    second: pair[1].describe(),
                });
            }
        }
        Ok(GeoIpSnapshot {
            ranges,
            valid_from: window.from,
            valid_to: window.to,
            provider_id: provider_id.to_string(),
        })
    }

    pub fn ranges(&self) -> &[IpRange] {
        &self.ranges
    }

    pub fn window(&self) -> TimeWindow {
        TimeWindow {
            from: self.valid_from,
            to: self.valid_to,
        }
    }

    pub fn covers(&self, t: Timestamp) -> bool {
        self.valid_from <= t && t < self.valid_to
    }

    /// Binary search for the unique range containing `ip`. Absence is a
    /// value, not an error.
    pub fn lookup(&self, ip: IpAddress) -> Option<&IpRange> {
        let idx = self.ranges.partition_point(|r| r.start <= ip);
        let candidate = self.ranges.get(idx.checked_sub(1)?)?;
        candidate.contains(ip).then_some(candidate)
    }

    /// Deduplicate anchors on exact coordinate equality and compute the
    /// range-per-anchor reuse factor.
    pub fn extract_anchors(&self) -> Result<AnchorSet, SnapshotError> {
        if self.ranges.is_empty() {
            return Err(SnapshotError::EmptySnapshot);
        }
        AnchorSet::from_anchors(self.ranges.iter().map(|r| r.anchor))
    }
}

/// The deduplicated anchor coordinates of a snapshot, with reuse stats.
#[derive(Debug, Clone, Serialize)]
pub struct AnchorSet {
    /// Distinct anchors, sorted by (lat, lon) for deterministic output.
    pub anchors: Vec<GeoPoint>,
    pub range_count: usize,
    /// range_count / |anchors|, dimensionless.
    pub reuse_factor: f64,
}

impl AnchorSet {
    pub fn from_anchors(iter: impl Iterator<Item = GeoPoint>) -> Result<Self, SnapshotError> {
        let mut seen: HashMap<(u64, u64), GeoPoint> = HashMap::new();
        let mut range_count = 0usize;
        for anchor in iter {
            range_count += 1;
            seen.entry(anchor.bits()).or_insert(anchor);
        }
        if range_count == 0 {
            return Err(SnapshotError::EmptySnapshot);
        }
        let mut anchors: Vec<GeoPoint> = seen.into_values().collect();
        anchors.sort_by(|a, b| a.lex_cmp(b));
        let reuse_factor = range_count as f64 / anchors.len() as f64;
        Ok(AnchorSet {
            anchors,
            range_count,
            reuse_factor,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub const SNAPSHOT_HEADER: [&str; 5] = ["start_ip", "end_ip", "lat", "lon", "conn_type"];

/// Parse one snapshot file (`start_ip,end_ip,lat,lon,conn_type`) valid
/// over the given window. Malformed records fail with their line number;
/// overlapping ranges fail naming both ranges.
pub fn parse_snapshot<R: Read>(
    source: R,
    provider_id: &str,
    window: TimeWindow,
) -> Result<GeoIpSnapshot, SnapshotError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers()?.clone();
    if header.iter().ne(SNAPSHOT_HEADER) {
        return Err(SnapshotError::BadHeader(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }

    let mut ranges = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");

        let start: IpAddress = field(0).parse().map_err(|reason| SnapshotError::BadIp {
            line,
            value: field(0).to_string(),
            reason,
        })?;
        let end: IpAddress = field(1).parse().map_err(|reason| SnapshotError::BadIp {
            line,
            value: field(1).to_string(),
            reason,
        })?;
        if start > end {
            return Err(SnapshotError::ReversedRange { line, start, end });
        }
        let lat: f64 = field(2).parse().map_err(|_| SnapshotError::BadNumber {
            line,
            value: field(2).to_string(),
        })?;
        let lon: f64 = field(3).parse().map_err(|_| SnapshotError::BadNumber {
            line,
            value: field(3).to_string(),
        })?;
        let anchor = GeoPoint::new(lat, lon)
            .map_err(|source| SnapshotError::BadCoordinate { line, source })?;
        let conn_type: ConnType = field(4).parse().map_err(|_| SnapshotError::BadConnType {
            line,
            value: field(4).to_string(),
        })?;

        ranges.push(IpRange {
            start,
            end,
            anchor,
            conn_type,
        });
    }

    GeoIpSnapshot::from_ranges(ranges, provider_id, window)
}

/// Write a snapshot in the same format `parse_snapshot` reads.
pub fn write_snapshot<W: Write>(snapshot: &GeoIpSnapshot, sink: W) -> Result<(), SnapshotError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(SNAPSHOT_HEADER)?;
    for range in &snapshot.ranges {
        writer.write_record([
            range.start.to_string(),
            range.end.to_string(),
            range.anchor.lat.to_string(),
            range.anchor.lon.to_string(),
            range.conn_type.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Snapshots of one provider ordered by validity window.
#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    pub provider_id: String,
    snapshots: Vec<GeoIpSnapshot>,
}

impl SnapshotSeries {
    pub fn new(
        provider_id: &str,
        mut snapshots: Vec<GeoIpSnapshot>,
    ) -> Result<Self, SnapshotError> {
        if snapshots.is_empty() {
            return Err(SnapshotError::EmptySeries);
        }
        snapshots.sort_by_key(|s| s.valid_from);
        for pair in snapshots.windows(2) {
            if pair[0].valid_to > pair[1].valid_from {
                return Err(SnapshotError::OverlappingWindows {
                    a_from: pair[0].valid_from,
                    a_to: pair[0].valid_to,
                    b_from: pair[1].valid_from,
                    b_to: pair[1].valid_to,
                });
            }
        }
        Ok(SnapshotSeries {
            provider_id: provider_id.to_string(),
            snapshots,
        })
    }

    pub fn snapshots(&self) -> &[GeoIpSnapshot] {
        &self.snapshots
    }

    /// Select the snapshot whose [valid_from, valid_to) window contains `t`.
    /// Outside every window this reports the nearest window, so gaps in
    /// coverage are visible rather than silently matched.
    pub fn snapshot_at(&self, t: Timestamp) -> Result<&GeoIpSnapshot, SnapshotError> {
        let idx = self.snapshots.partition_point(|s| s.valid_from <= t);
        if let Some(candidate) = idx.checked_sub(1).and_then(|i| self.snapshots.get(i)) {
            if candidate.covers(t) {
                return Ok(candidate);
            }
        }
        let nearest = self
            .snapshots
            .iter()
            .min_by_key(|s| {
                if t < s.valid_from {
                    s.valid_from - t
                } else {
                    (t - s.valid_to).saturating_add(1)
                }
            })
            .expect("series is non-empty");
        Err(SnapshotError::NoCoverage {
            t,
            nearest_from: nearest.valid_from,
            nearest_to: nearest.valid_to,
        })
    }

    /// Union of all windows as (earliest from, latest to).
    pub fn coverage(&self) -> TimeWindow {
        TimeWindow {
            from: self.snapshots.first().map(|s| s.valid_from).unwrap_or(0),
            to: self.snapshots.last().map(|s| s.valid_to).unwrap_or(0),
        }
    }
}

/// Load a snapshot series index (`provider,valid_from,valid_to,file`,
/// paths relative to the index file) and parse every referenced snapshot.
/// Returns one series per provider, sorted by provider id.
pub fn load_series_index(index_path: &Path) -> Result<Vec<SnapshotSeries>, SnapshotError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));

    let mut by_provider: HashMap<String, Vec<GeoIpSnapshot>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: &str| SnapshotError::BadIndexRow {
            line,
            reason: reason.to_string(),
        };
        if record.len() != 4 {
            return Err(bad("expected provider,valid_from,valid_to,file"));
        }
        let provider = record.get(0).unwrap_or("").to_string();
        let from: Timestamp = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("bad valid_from"))?;
        let to: Timestamp = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("bad valid_to"))?;
        let file = base.join(record.get(3).unwrap_or(""));
        let reader = std::fs::File::open(&file)?;
        let snapshot = parse_snapshot(reader, &provider, TimeWindow { from, to })?;
        by_provider.entry(provider).or_default().push(snapshot);
    }

    let mut providers: Vec<String> = by_provider.keys().cloned().collect();
    providers.sort();
    providers
        .into_iter()
        .map(|p| {
            let snapshots = by_provider.remove(&p).unwrap();
            SnapshotSeries::new(&p, snapshots)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const WINDOW: TimeWindow = TimeWindow { from: 0, to: 100 };

    fn two_range_csv() -> &'static str {
        "start_ip,end_ip,lat,lon,conn_type\n\
         1.0.0.0,1.0.0.255,40.4,-3.7,fixed\n\
         1.0.1.0,1.0.1.255,41.4,2.2,cellular\n"
    }

    #[test]
    fn parses_minimal_snapshot() {
        let snap = parse_snapshot(two_range_csv().as_bytes(), "a", WINDOW).unwrap();
        assert_eq!(snap.ranges().len(), 2);
        assert_eq!(
            snap.ranges()[0].anchor,
            GeoPoint {
                lat: 40.4,
                lon: -3.7
            }
        );
        assert_eq!(snap.ranges()[1].conn_type, ConnType::Cellular);
    }

    #[test]
    fn overlap_is_a_hard_error_naming_both_ranges() {
        let csv = "start_ip,end_ip,lat,lon,conn_type\n\
                   1.0.0.0,1.0.0.255,40.0,-3.0,fixed\n\
                   1.0.0.128,1.0.1.0,41.0,2.0,fixed\n";
        let err = parse_snapshot(csv.as_bytes(), "a", WINDOW).unwrap_err();
        match err {
            SnapshotError::Overlap { first, second } => {
                assert_eq!(first, "1.0.0.0-1.0.0.255");
                assert_eq!(second, "1.0.0.128-1.0.1.0");
            }
            other => panic!("expected overlap, got {other}"),
        }
    }

    #[test]
    fn ipv6_is_rejected_with_line_number() {
        let csv = "start_ip,end_ip,lat,lon,conn_type\n\
                   2001:db8::1,2001:db8::ff,40.0,-3.0,fixed\n";
        let err = parse_snapshot(csv.as_bytes(), "a", WINDOW).unwrap_err();
        match err {
            SnapshotError::BadIp { line, reason, .. } => {
                assert_eq!(line, 2);
                assert!(reason.contains("IPv6"), "reason: {reason}");
            }
            other => panic!("expected BadIp, got {other}"),
        }
    }

    #[test]
    fn out_of_range_coordinate_is_rejected_with_line_number() {
        let csv = "start_ip,end_ip,lat,lon,conn_type\n\
                   1.0.0.0,1.0.0.255,40.0,-3.0,fixed\n\
                   1.0.1.0,1.0.1.255,95.0,0.0,fixed\n";
        let err = parse_snapshot(csv.as_bytes(), "a", WINDOW).unwrap_err();
        assert!(
            matches!(err, SnapshotError::BadCoordinate { line: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn lookup_hits_and_misses() {
        let snap = parse_snapshot(two_range_csv().as_bytes(), "a", WINDOW).unwrap();
        let hit = snap.lookup("1.0.0.42".parse().unwrap()).unwrap();
        assert_eq!(
            hit.anchor,
            GeoPoint {
                lat: 40.4,
                lon: -3.7
            }
        );
        assert!(snap.lookup("9.9.9.9".parse().unwrap()).is_none());
        // Range ends are inclusive.
        assert!(snap.lookup("1.0.0.255".parse().unwrap()).is_some());
    }

    #[test]
    fn anchors_deduplicate_exactly() {
        let csv = "start_ip,end_ip,lat,lon,conn_type\n\
                   1.0.0.0,1.0.0.255,40.4,-3.7,fixed\n\
                   1.0.1.0,1.0.1.255,40.4,-3.7,fixed\n\
                   1.0.2.0,1.0.2.255,41.4,2.2,fixed\n";
        let snap = parse_snapshot(csv.as_bytes(), "a", WINDOW).unwrap();
        let set = snap.extract_anchors().unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.range_count, 3);
        assert_eq!(set.reuse_factor, 3.0 / 2.0);
    }

    #[test]
    fn all_distinct_anchors_have_reuse_factor_one() {
        let snap = parse_snapshot(two_range_csv().as_bytes(), "a", WINDOW).unwrap();
        let set = snap.extract_anchors().unwrap();
        assert_eq!(set.reuse_factor, 1.0);
    }

    #[test]
    fn empty_snapshot_has_no_anchor_set() {
        let snap = GeoIpSnapshot::from_ranges(vec![], "a", WINDOW).unwrap();
        assert!(matches!(
            snap.extract_anchors(),
            Err(SnapshotError::EmptySnapshot)
        ));
    }

    fn series_of_three() -> SnapshotSeries {
        let snap =
            |from, to| GeoIpSnapshot::from_ranges(vec![], "a", TimeWindow { from, to }).unwrap();
        SnapshotSeries::new("a", vec![snap(0, 10), snap(10, 20), snap(25, 30)]).unwrap()
    }

    #[test]
    fn snapshot_at_selects_covering_window() {
        let series = series_of_three();
        assert_eq!(
            series.snapshot_at(15).unwrap().window(),
            TimeWindow { from: 10, to: 20 }
        );
        // Half-open: valid_to belongs to the next window.
        assert_eq!(
            series.snapshot_at(10).unwrap().window(),
            TimeWindow { from: 10, to: 20 }
        );
    }

    #[test]
    fn snapshot_at_reports_nearest_window_on_miss() {
        let series = series_of_three();
        match series.snapshot_at(-5).unwrap_err() {
            SnapshotError::NoCoverage {
                nearest_from: 0,
                nearest_to: 10,
                ..
            } => {}
            other => panic!("unexpected {other}"),
        }
        // In the gap [20, 25) the nearest window is the one just ended.
        match series.snapshot_at(21).unwrap_err() {
            SnapshotError::NoCoverage {
                nearest_from: 10,
                nearest_to: 20,
                ..
            } => {}
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn reversed_window_is_rejected() {
        let err =
            GeoIpSnapshot::from_ranges(vec![], "a", TimeWindow { from: 5, to: 5 }).unwrap_err();
        assert!(matches!(err, SnapshotError::BadWindow { .. }));
    }

    prop_compose! {
        // Non-overlapping ranges built by walking up the address space.
        fn arb_ranges()(steps in proptest::collection::vec((1u32..2000, 0u32..500, -80.0f64..80.0, -170.0f64..170.0, 0u8..3), 1..60))
            -> Vec<IpRange>
        {
            let mut ranges = Vec::new();
            let mut cursor: u64 = 0x0100_0000;
            for (len, gap, lat, lon, conn) in steps {
                let start = cursor + gap as u64;
                let end = start + len as u64;
                if end > u32::MAX as u64 {
                    break;
                }
                let conn_type = match conn {
                    0 => ConnType::Fixed,
                    1 => ConnType::Cellular,
                    _ => ConnType::Unknown,
                };
                // Quantize so text round-trips reproduce the same f64s.
                let q = |x: f64| (x * 1e4).round() / 1e4;
                ranges.push(IpRange {
                    start: IpAddress(start as u32),
                    end: IpAddress(end as u32),
                    anchor: GeoPoint { lat: q(lat), lon: q(lon) },
                    conn_type,
                });
                cursor = end + 1;
            }
            ranges
        }
    }

    proptest! {
        #[test]
        fn lookup_matches_linear_scan(ranges in arb_ranges(), probes in proptest::collection::vec(0u32..0x0200_0000, 200)) {
            let snap = GeoIpSnapshot::from_ranges(ranges.clone(), "a", WINDOW).unwrap();
            for probe in probes {
                let ip = IpAddress(probe);
                let fast = snap.lookup(ip);
                let slow = ranges.iter().find(|r| r.contains(ip));
                prop_assert_eq!(fast, slow);
            }
        }

        #[test]
        fn parse_serialize_parse_is_identity(ranges in arb_ranges()) {
            prop_assume!(!ranges.is_empty());
            let snap = GeoIpSnapshot::from_ranges(ranges, "a", WINDOW).unwrap();
            let mut first = Vec::new();
            write_snapshot(&snap, &mut first).unwrap();
            let reparsed = parse_snapshot(first.as_slice(), "a", WINDOW).unwrap();
            prop_assert_eq!(snap.ranges(), reparsed.ranges());
            let mut second = Vec::new();
            write_snapshot(&reparsed, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }

        #[test]
        fn reuse_factor_times_anchor_count_is_range_count(ranges in arb_ranges()) {
            prop_assume!(!ranges.is_empty());
            let snap = GeoIpSnapshot::from_ranges(ranges, "a", WINDOW).unwrap();
            let set = snap.extract_anchors().unwrap();
            // Naive dedup oracle over coordinate bits.
            let mut naive: Vec<(u64, u64)> =
                snap.ranges().iter().map(|r| r.anchor.bits()).collect();
            naive.sort_unstable();
            naive.dedup();
            prop_assert_eq!(set.len(), naive.len());
            prop_assert_eq!(set.reuse_factor, set.range_count as f64 / set.len() as f64);
        }

        #[test]
        fn snapshot_at_matches_linear_scan(t in -50i64..150) {
            let series = series_of_three();
            let fast = series.snapshot_at(t).ok().map(|s| s.window());
            let slow = series
                .snapshots()
                .iter()
                .find(|s| s.covers(t))
                .map(|s| s.window());
            prop_assert_eq!(fast, slow);
        }
    }
}

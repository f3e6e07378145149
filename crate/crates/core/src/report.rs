//! Report assembly: runs the audit pipeline over input files and shapes
//! the results into the JSON/CSV outputs.

use crate::anchor::{self, AnchorError, NearestAnchorIndex, OptimalAssignment, UpperBoundReport};
use crate::events::{ingest_events, join, EventError, IngestResult, JoinOutput, UrbanizationMap};
use crate::ip::{load_series_index, AnchorSet, SnapshotError, SnapshotSeries};
use crate::metrics::{
    accuracy, anchor_density_correlation, precision_distribution, temporal_stability, AccuracyCell,
    CorrelationReport, MetricsError, PrecisionDistribution, TemporalStability, ALL_DIMENSIONS,
};
use crate::region::{regions_from_geojson, RegionError, RegionIndex};
use crate::{TimeWindow, Timestamp};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("missing_input: {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error("join failed: {0}")]
    Join(#[from] crate::events::JoinError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Run identification stamped on every output. Carries no wall-clock
/// time, so identical inputs produce identical outputs.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Provenance {
            tool: "geoaudit".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config_bytes),
            seed,
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# {} {} config={} seed={}",
            self.tool, self.version, self.config_hash, self.seed
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Knobs of an audit run.
#[derive(Debug, Clone, Serialize)]
pub struct AuditOptions {
    pub grid_resolution: u8,
    pub levels: Vec<u8>,
    pub include_upper_bound: bool,
    pub max_invalid_fraction: f64,
    /// Restrict ingestion to this window; `None` accepts all events.
    pub window: Option<TimeWindow>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            grid_resolution: 9,
            levels: vec![1, 2, 3, 4, 5],
            include_upper_bound: true,
            max_invalid_fraction: 0.01,
            window: None,
        }
    }
}

/// Extent of one snapshot: how many ranges map onto how many distinct
/// anchors.
#[derive(Debug, Clone, Serialize)]
pub struct SnapshotExtent {
    pub provider_id: String,
    pub valid_from: Timestamp,
    pub valid_to: Timestamp,
    pub range_count: usize,
    pub anchor_count: usize,
    pub reuse_factor: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct IngestSummary {
    pub total_records: usize,
    pub valid_events: usize,
    pub rejected: usize,
    pub reject_reasons: BTreeMap<String, usize>,
    pub matched: usize,
    pub unmatched: usize,
    pub unmatched_reasons: BTreeMap<String, usize>,
}

/// The audit output: everything is keyed by metric, then level (where it
/// applies), then grouping dimension, then group value.
#[derive(Debug, Serialize)]
pub struct AuditReport {
    pub provenance: Provenance,
    pub ingest: IngestSummary,
    pub extent: Vec<SnapshotExtent>,
    pub precision: BTreeMap<String, BTreeMap<String, PrecisionDistribution>>,
    pub accuracy: BTreeMap<u8, BTreeMap<String, BTreeMap<String, AccuracyCell>>>,
    pub anchor_correlation: Option<CorrelationReport>,
    pub temporal_stability: Option<TemporalStability>,
    pub upper_bound: Option<UpperBoundReport>,
    pub notes: Vec<String>,
}

pub const NOTE_NO_SAMPLES: &str = "no samples joined; distribution metrics omitted";

pub fn note_skipped(metric: &str, reason: &str) -> String {
    format!("{metric} skipped: {reason}")
}

/// Input files of an audit run.
#[derive(Debug, Clone)]
pub struct AuditPaths {
    pub snapshots_index: PathBuf,
    pub events: PathBuf,
    pub regions: PathBuf,
    pub urbanization: Option<PathBuf>,
}

impl AuditPaths {
    /// Conventional layout of a world directory.
    pub fn from_dir(dir: &Path) -> Self {
        let urb = dir.join("urbanization.csv");
        AuditPaths {
            snapshots_index: dir.join("snapshots.csv"),
            events: dir.join("events.csv"),
            regions: dir.join("regions.geojson"),
            urbanization: urb.exists().then_some(urb),
        }
    }

    pub fn check(&self) -> Result<(), AuditError> {
        if !self.snapshots_index.exists() {
            return Err(AuditError::MissingInput("snapshots"));
        }
        if !self.events.exists() {
            return Err(AuditError::MissingInput("events"));
        }
        if !self.regions.exists() {
            return Err(AuditError::MissingInput("regions"));
        }
        Ok(())
    }
}

/// Everything an audit run produces beyond the report itself.
pub struct AuditOutcome {
    pub report: AuditReport,
    pub join: JoinOutput,
    pub optimal: Option<Vec<OptimalAssignment>>,
}

/// The distinct anchors across every snapshot of a series, used for the
/// density correlation and the nearest-anchor analysis.
pub fn series_anchor_set(series: &SnapshotSeries) -> Result<AnchorSet, SnapshotError> {
    AnchorSet::from_anchors(
        series
            .snapshots()
            .iter()
            .flat_map(|s| s.ranges().iter().map(|r| r.anchor)),
    )
}

/// Load inputs and run the full audit pipeline. The audited series is the
/// first provider in the index ordering; every provider contributes
/// extent rows.
pub fn run_audit(
    paths: &AuditPaths,
    options: &AuditOptions,
    provenance: Provenance,
) -> Result<AuditOutcome, AuditError> {
    paths.check()?;
    let series_list = load_series_index(&paths.snapshots_index)?;
    if series_list.is_empty() {
        return Err(AuditError::MissingInput("snapshots"));
    }
    let regions = RegionIndex::build(
        regions_from_geojson(&std::fs::read_to_string(&paths.regions)?)?,
        options.grid_resolution,
    )?;
    let urbanization = match &paths.urbanization {
        Some(path) => UrbanizationMap::from_reader(std::fs::File::open(path)?)?,
        None => UrbanizationMap::empty(),
    };
    let ingest = ingest_events(
        std::fs::File::open(&paths.events)?,
        options.max_invalid_fraction,
        options.window,
    )?;

    let audited = &series_list[0];
    let joined = join(
        &ingest.events,
        audited,
        &urbanization,
        &regions,
        &options.levels,
    )?;
    let (report, optimal) = build_report(
        &series_list,
        audited,
        &ingest,
        &joined,
        &regions,
        options,
        provenance,
    )?;

    Ok(AuditOutcome {
        report,
        join: joined,
        optimal,
    })
}

/// Assemble the report from already-joined samples. When the upper bound
/// is computed, the per-sample optimal assignments come back with it.
#[allow(clippy::type_complexity)]
pub fn build_report(
    series_list: &[SnapshotSeries],
    audited: &SnapshotSeries,
    ingest: &IngestResult,
    joined: &JoinOutput,
    regions: &RegionIndex,
    options: &AuditOptions,
    provenance: Provenance,
) -> Result<(AuditReport, Option<Vec<OptimalAssignment>>), AuditError> {
    let mut notes = Vec::new();

    let mut extent = Vec::new();
    for series in series_list {
        for snapshot in series.snapshots() {
            let set = match snapshot.extract_anchors() {
                Ok(set) => set,
                Err(SnapshotError::EmptySnapshot) => {
                    notes.push(note_skipped("extent", "snapshot has no ranges"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            extent.push(SnapshotExtent {
                provider_id: series.provider_id.clone(),
                valid_from: snapshot.valid_from,
                valid_to: snapshot.valid_to,
                range_count: set.range_count,
                anchor_count: set.len(),
                reuse_factor: set.reuse_factor,
            });
        }
    }

    let mut unmatched_reasons: BTreeMap<String, usize> = BTreeMap::new();
    for u in &joined.unmatched {
        *unmatched_reasons
            .entry(u.reason.as_str().to_string())
            .or_insert(0) += 1;
    }
    let ingest_summary = IngestSummary {
        total_records: ingest.total_records,
        valid_events: ingest.events.len(),
        rejected: ingest.rejects.len(),
        reject_reasons: ingest.reject_summary(),
        matched: joined.samples.len(),
        unmatched: joined.unmatched.len(),
        unmatched_reasons,
    };

    let samples = &joined.samples;
    let mut precision = BTreeMap::new();
    let mut accuracy_out: BTreeMap<u8, BTreeMap<String, BTreeMap<String, AccuracyCell>>> =
        BTreeMap::new();
    if samples.is_empty() {
        notes.push(NOTE_NO_SAMPLES.to_string());
    } else {
        for dim in ALL_DIMENSIONS {
            precision.insert(
                dim.as_str().to_string(),
                precision_distribution(samples, dim),
            );
        }
        for &level in &options.levels {
            let mut by_dim = BTreeMap::new();
            for dim in ALL_DIMENSIONS {
                let cells = accuracy(samples, level, dim);
                if !cells.is_empty() {
                    by_dim.insert(dim.as_str().to_string(), cells);
                }
            }
            accuracy_out.insert(level, by_dim);
        }
    }

    let anchors = series_anchor_set(audited).ok();
    let anchor_correlation = match &anchors {
        Some(set) if !samples.is_empty() => {
            match anchor_density_correlation(samples, set, options.grid_resolution) {
                Ok(corr) => Some(corr),
                Err(e) => {
                    notes.push(note_skipped("anchor_correlation", &e.to_string()));
                    None
                }
            }
        }
        _ => {
            notes.push(note_skipped(
                "anchor_correlation",
                "no samples or no anchors",
            ));
            None
        }
    };

    let stability = if samples.is_empty() {
        None
    } else {
        match temporal_stability(samples) {
            Ok(s) => Some(s),
            Err(e) => {
                notes.push(note_skipped("temporal_stability", &e.to_string()));
                None
            }
        }
    };

    let (upper_bound, optimal) = if options.include_upper_bound && !samples.is_empty() {
        let set = anchors.as_ref().expect("anchors exist when samples joined");
        let index = NearestAnchorIndex::build(set)?;
        let (ub, assignments) =
            anchor::upper_bound_report(samples, &index, regions, &options.levels)?;
        (Some(ub), Some(assignments))
    } else {
        if options.include_upper_bound {
            notes.push(note_skipped("upper_bound", "no samples"));
        }
        (None, None)
    };

    let report = AuditReport {
        provenance,
        ingest: ingest_summary,
        extent,
        precision,
        accuracy: accuracy_out,
        anchor_correlation,
        temporal_stability: stability,
        upper_bound,
        notes,
    };
    Ok((report, optimal))
}

// ---------------------------------------------------------------------------
// Output writers. Every file starts with a provenance comment line and is
// written temp-then-rename so partial outputs never appear.

/// Atomically write `bytes` to `path` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy())
        .unwrap_or_default();
    let tmp = dir.join(format!(".tmp-{file_name}"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn report_json(report: &AuditReport) -> Result<String, AuditError> {
    Ok(format!("{}\n", serde_json::to_string_pretty(report)?))
}

/// Flat quantile table: `dimension,group,count,p1,...,p99`.
pub fn precision_table_csv(report: &AuditReport) -> String {
    let mut out = String::new();
    out.push_str(&report.provenance.header_line());
    out.push('\n');
    out.push_str("dimension,group,count,p1,p5,p10,p25,p50,p75,p90,p95,p99\n");
    for (dim, groups) in &report.precision {
        for (group, dist) in groups {
            out.push_str(&format!(
                "{dim},{group},{},{},{},{},{},{},{},{},{},{}\n",
                dist.sample_count,
                dist.quantiles["p1"],
                dist.quantiles["p5"],
                dist.quantiles["p10"],
                dist.quantiles["p25"],
                dist.quantiles["p50"],
                dist.quantiles["p75"],
                dist.quantiles["p90"],
                dist.quantiles["p95"],
                dist.quantiles["p99"],
            ));
        }
    }
    out
}

/// Flat accuracy table: `level,dimension,group,claimed,matched,accuracy`.
pub fn accuracy_table_csv(report: &AuditReport) -> String {
    let mut out = String::new();
    out.push_str(&report.provenance.header_line());
    out.push('\n');
    out.push_str("level,dimension,group,claimed,matched,accuracy\n");
    for (level, by_dim) in &report.accuracy {
        for (dim, groups) in by_dim {
            for (group, cell) in groups {
                let acc = cell.accuracy.map(|a| a.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{level},{dim},{group},{},{},{acc}\n",
                    cell.claimed_in_region, cell.matched_in_region
                ));
            }
        }
    }
    out
}

/// CDF support points of one distribution: `distance_km,cumulative_fraction`.
pub fn cdf_csv(provenance: &Provenance, dist: &PrecisionDistribution) -> String {
    let mut out = String::new();
    out.push_str(&provenance.header_line());
    out.push('\n');
    out.push_str("distance_km,cumulative_fraction\n");
    for point in &dist.cdf {
        out.push_str(&format!(
            "{},{}\n",
            point.distance_km, point.cumulative_fraction
        ));
    }
    out
}

/// Per-sample actual-versus-optimal errors: `error_actual_km,error_optimal_km`.
pub fn optimal_errors_csv(
    provenance: &Provenance,
    samples: &[crate::events::JoinedSample],
    assignments: &[OptimalAssignment],
) -> String {
    let mut out = String::new();
    out.push_str(&provenance.header_line());
    out.push('\n');
    out.push_str("error_actual_km,error_optimal_km\n");
    for (s, a) in samples.iter().zip(assignments) {
        out.push_str(&format!("{},{}\n", s.error_km, a.error_opt_km));
    }
    out
}

/// Filesystem-safe version of a group value for use in file names.
pub fn sanitize_for_filename(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

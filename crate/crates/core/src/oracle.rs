//! Straight-line reference implementations of the whole pipeline, for
//! equivalence testing at desk scale. Every accelerated path is replaced
//! by its obvious O(n*m) counterpart: linear scans over IP ranges and
//! snapshot windows, membership against every polygon with no prefilter,
//! exhaustive nearest-anchor search, full-sort quantiles, and a two-pass
//! Pearson correlation. Shared with the main pipeline are only the file
//! parsers, the data types, and the distance function they both measure
//! with.

use crate::anchor::UpperBoundReport;
use crate::events::{ingest_events, JoinedSample, UrbanizationMap};
use crate::geo::{cell_of, haversine_km, GeoPoint};
use crate::ip::{load_series_index, SnapshotError, SnapshotSeries};
use crate::metrics::{
    cdf_supports, AccuracyCell, CdfPoint, CorrelationReport, MetricsError, PrecisionDistribution,
    TemporalStability, ALL_DIMENSIONS, QUANTILE_LABELS, SECONDS_PER_DAY,
};
use crate::region::{regions_from_geojson, AdminRegion, RegionError};
use crate::report::{
    note_skipped, AuditError, AuditOptions, AuditPaths, AuditReport, IngestSummary, Provenance,
    SnapshotExtent, NOTE_NO_SAMPLES,
};
use serde_json::Value;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle scale guard: {what} = {got} exceeds limit {limit}")]
    ScaleGuard {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The oracle refuses inputs past these sizes; its algorithms are
/// quadratic by design.
#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    pub max_events: usize,
    pub max_regions: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_events: 100_000,
            max_regions: 1_000,
        }
    }
}

// --- naive primitives ------------------------------------------------------

fn naive_sorted(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    sorted
}

fn naive_quantile(sorted: &[f64], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn naive_distribution(errors: &[f64]) -> Option<PrecisionDistribution> {
    if errors.is_empty() {
        return None;
    }
    let sorted = naive_sorted(errors);
    let quantiles: BTreeMap<String, f64> = QUANTILE_LABELS
        .iter()
        .map(|&(label, q)| (label.to_string(), naive_quantile(&sorted, q)))
        .collect();
    let n = sorted.len() as f64;
    let cdf = cdf_supports(*sorted.last().unwrap())
        .into_iter()
        .map(|support| CdfPoint {
            distance_km: support,
            cumulative_fraction: sorted.iter().filter(|&&e| e <= support).count() as f64 / n,
        })
        .collect();
    Some(PrecisionDistribution {
        sample_count: sorted.len(),
        quantiles,
        cdf,
    })
}

fn naive_pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn naive_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Membership by testing every region of the level; no spatial prefilter.
fn naive_region_of(
    regions: &[AdminRegion],
    p: GeoPoint,
    level: u8,
) -> Result<Option<String>, RegionError> {
    let mut found: Option<&AdminRegion> = None;
    for region in regions.iter().filter(|r| r.level == level) {
        if region.contains(p) {
            if let Some(prev) = found {
                return Err(RegionError::Ambiguous {
                    first: prev.id.clone(),
                    second: region.id.clone(),
                    point: p,
                    level,
                });
            }
            found = Some(region);
        }
    }
    Ok(found.map(|r| r.id.clone()))
}

fn naive_nearest(anchors: &[GeoPoint], p: GeoPoint) -> (GeoPoint, f64) {
    let mut best: Option<(f64, GeoPoint)> = None;
    for &anchor in anchors {
        let d = haversine_km(p, anchor);
        match &best {
            None => best = Some((d, anchor)),
            Some((bd, ba)) => {
                if d < *bd || (d == *bd && anchor.lex_cmp(ba).is_lt()) {
                    best = Some((d, anchor));
                }
            }
        }
    }
    let (d, a) = best.expect("anchor set non-empty");
    (a, d)
}

fn naive_distinct_anchors(series: &SnapshotSeries) -> (Vec<GeoPoint>, usize) {
    let mut all: Vec<GeoPoint> = series
        .snapshots()
        .iter()
        .flat_map(|s| s.ranges().iter().map(|r| r.anchor))
        .collect();
    let total = all.len();
    all.sort_by(|a, b| a.lex_cmp(b));
    all.dedup_by(|a, b| a.bits() == b.bits());
    (all, total)
}

// --- the oracle pipeline ---------------------------------------------------

/// Compute the reference report for a world from its files, using only
/// straight-line algorithms.
pub fn oracle_report(
    paths: &AuditPaths,
    options: &AuditOptions,
    provenance: Provenance,
    limits: OracleLimits,
) -> Result<AuditReport, OracleError> {
    paths.check().map_err(OracleError::Audit)?;
    let series_list = load_series_index(&paths.snapshots_index)?;
    let regions = regions_from_geojson(&std::fs::read_to_string(&paths.regions)?)?;
    if regions.len() > limits.max_regions {
        return Err(OracleError::ScaleGuard {
            what: "regions",
            got: regions.len(),
            limit: limits.max_regions,
        });
    }
    for region in &regions {
        region.validate()?;
    }
    let urbanization = match &paths.urbanization {
        Some(path) => {
            UrbanizationMap::from_reader(std::fs::File::open(path)?).map_err(AuditError::Event)?
        }
        None => UrbanizationMap::empty(),
    };
    let ingest = ingest_events(
        std::fs::File::open(&paths.events)?,
        options.max_invalid_fraction,
        options.window,
    )
    .map_err(AuditError::Event)?;
    if ingest.events.len() > limits.max_events {
        return Err(OracleError::ScaleGuard {
            what: "events",
            got: ingest.events.len(),
            limit: limits.max_events,
        });
    }

    let audited = &series_list[0];
    let mut notes: Vec<String> = Vec::new();

    // Extent rows by naive dedup.
    let mut extent = Vec::new();
    for series in &series_list {
        for snapshot in series.snapshots() {
            if snapshot.ranges().is_empty() {
                notes.push(note_skipped("extent", "snapshot has no ranges"));
                continue;
            }
            let mut bits: Vec<(u64, u64)> =
                snapshot.ranges().iter().map(|r| r.anchor.bits()).collect();
            bits.sort_unstable();
            bits.dedup();
            extent.push(SnapshotExtent {
                provider_id: series.provider_id.clone(),
                valid_from: snapshot.valid_from,
                valid_to: snapshot.valid_to,
                range_count: snapshot.ranges().len(),
                anchor_count: bits.len(),
                reuse_factor: snapshot.ranges().len() as f64 / bits.len() as f64,
            });
        }
    }

    // Join by linear scans.
    let mut samples: Vec<JoinedSample> = Vec::new();
    let mut unmatched_reasons: BTreeMap<String, usize> = BTreeMap::new();
    for event in &ingest.events {
        let snapshot = audited
            .snapshots()
            .iter()
            .find(|s| s.covers(event.timestamp));
        let Some(snapshot) = snapshot else {
            *unmatched_reasons
                .entry("no_snapshot_for_timestamp".to_string())
                .or_insert(0) += 1;
            continue;
        };
        let range = snapshot.ranges().iter().find(|r| r.contains(event.ip));
        let Some(range) = range else {
            *unmatched_reasons
                .entry("ip_not_in_snapshot".to_string())
                .or_insert(0) += 1;
            continue;
        };
        let mut gt_region_by_level = BTreeMap::new();
        let mut ip_region_by_level = BTreeMap::new();
        for &level in &options.levels {
            gt_region_by_level.insert(level, naive_region_of(&regions, event.pos_gt, level)?);
            ip_region_by_level.insert(level, naive_region_of(&regions, range.anchor, level)?);
        }
        samples.push(JoinedSample {
            event: event.clone(),
            pos_ip: range.anchor,
            error_km: haversine_km(event.pos_gt, range.anchor),
            conn_type: range.conn_type,
            urbanization: urbanization.classify(event.pos_gt),
            gt_region_by_level,
            ip_region_by_level,
        });
    }

    let unmatched: usize = unmatched_reasons.values().sum();
    let ingest_summary = IngestSummary {
        total_records: ingest.total_records,
        valid_events: ingest.events.len(),
        rejected: ingest.rejects.len(),
        reject_reasons: ingest.reject_summary(),
        matched: samples.len(),
        unmatched,
        unmatched_reasons,
    };

    // Distribution metrics.
    let mut precision = BTreeMap::new();
    let mut accuracy: BTreeMap<u8, BTreeMap<String, BTreeMap<String, AccuracyCell>>> =
        BTreeMap::new();
    if samples.is_empty() {
        notes.push(NOTE_NO_SAMPLES.to_string());
    } else {
        for dim in ALL_DIMENSIONS {
            let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for sample in &samples {
                groups
                    .entry(dim.value_of(sample))
                    .or_default()
                    .push(sample.error_km);
            }
            let dists: BTreeMap<String, PrecisionDistribution> = groups
                .into_iter()
                .filter_map(|(value, errors)| naive_distribution(&errors).map(|d| (value, d)))
                .collect();
            precision.insert(dim.as_str().to_string(), dists);
        }
        for &level in &options.levels {
            let mut by_dim = BTreeMap::new();
            for dim in ALL_DIMENSIONS {
                let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
                for sample in &samples {
                    let claimed = sample
                        .ip_region_by_level
                        .get(&level)
                        .and_then(|r| r.as_ref());
                    let Some(claimed) = claimed else { continue };
                    let entry = counts.entry(dim.value_of(sample)).or_default();
                    entry.1 += 1;
                    if sample
                        .gt_region_by_level
                        .get(&level)
                        .and_then(|r| r.as_ref())
                        == Some(claimed)
                    {
                        entry.0 += 1;
                    }
                }
                if !counts.is_empty() {
                    by_dim.insert(
                        dim.as_str().to_string(),
                        counts
                            .into_iter()
                            .map(|(value, (matched, claimed))| {
                                (
                                    value,
                                    AccuracyCell {
                                        matched_in_region: matched,
                                        claimed_in_region: claimed,
                                        accuracy: Some(matched as f64 / claimed as f64),
                                    },
                                )
                            })
                            .collect(),
                    );
                }
            }
            accuracy.insert(level, by_dim);
        }
    }

    // Anchor-density correlation over grid cells, two-pass Pearson.
    let (anchor_points, _) = naive_distinct_anchors(audited);
    let anchor_correlation = if samples.is_empty() || anchor_points.is_empty() {
        notes.push(note_skipped(
            "anchor_correlation",
            "no samples or no anchors",
        ));
        None
    } else {
        let mut errors_by_cell: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for sample in &samples {
            let cell = cell_of(sample.event.pos_gt, options.grid_resolution)
                .map_err(|e| AuditError::Metrics(MetricsError::Geo(e)))?;
            errors_by_cell
                .entry(cell.index)
                .or_default()
                .push(sample.error_km);
        }
        let mut anchors_by_cell: BTreeMap<u64, usize> = BTreeMap::new();
        for anchor in &anchor_points {
            let cell = cell_of(*anchor, options.grid_resolution)
                .map_err(|e| AuditError::Metrics(MetricsError::Geo(e)))?;
            *anchors_by_cell.entry(cell.index).or_insert(0) += 1;
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut no_anchor = 0usize;
        let mut nonpositive = 0usize;
        for (cell, errors) in errors_by_cell {
            let count = anchors_by_cell.get(&cell).copied().unwrap_or(0);
            if count == 0 {
                no_anchor += 1;
                continue;
            }
            let median = naive_quantile(&naive_sorted(&errors), 0.5);
            if median <= 0.0 {
                nonpositive += 1;
                continue;
            }
            xs.push(median.log10());
            ys.push((count as f64).log10());
        }
        if xs.len() < 2 {
            let err = MetricsError::InsufficientData {
                what: "cells with both a positive median error and an anchor",
                needed: 2,
                got: xs.len(),
            };
            notes.push(note_skipped("anchor_correlation", &err.to_string()));
            None
        } else {
            Some(CorrelationReport {
                r: naive_pearson(&xs, &ys),
                cells_used: xs.len(),
                cells_excluded_no_anchor: no_anchor,
                cells_excluded_nonpositive_median: nonpositive,
            })
        }
    };

    // Temporal stability.
    let temporal_stability = if samples.is_empty() {
        None
    } else {
        let mut by_day: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for sample in &samples {
            by_day
                .entry(sample.event.timestamp.div_euclid(SECONDS_PER_DAY))
                .or_default()
                .push(sample.error_km);
        }
        if by_day.len() < 2 {
            let err = MetricsError::InsufficientData {
                what: "days with samples",
                needed: 2,
                got: by_day.len(),
            };
            notes.push(note_skipped("temporal_stability", &err.to_string()));
            None
        } else {
            let daily_median_km: BTreeMap<i64, f64> = by_day
                .into_iter()
                .map(|(day, errors)| (day, naive_quantile(&naive_sorted(&errors), 0.5)))
                .collect();
            let medians: Vec<f64> = daily_median_km.values().copied().collect();
            let meters: Vec<f64> = medians.iter().map(|m| m * 1000.0).collect();
            Some(TemporalStability {
                daily_median_km,
                variance_km2: naive_variance(&medians),
                variance_m2: naive_variance(&meters),
            })
        }
    };

    // Upper bound via exhaustive nearest-anchor search.
    let upper_bound = if options.include_upper_bound && !samples.is_empty() {
        let mut best_count = 0usize;
        let mut optimal_errors = Vec::with_capacity(samples.len());
        let mut level_counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
        for sample in &samples {
            let (nearest, d) = naive_nearest(&anchor_points, sample.event.pos_gt);
            if nearest.bits() == sample.pos_ip.bits() {
                best_count += 1;
            }
            optimal_errors.push(d);
            for &level in &options.levels {
                let claimed = naive_region_of(&regions, nearest, level)?;
                let Some(claimed) = claimed else { continue };
                let entry = level_counts.entry(level).or_default();
                entry.1 += 1;
                if sample
                    .gt_region_by_level
                    .get(&level)
                    .and_then(|r| r.as_ref())
                    == Some(&claimed)
                {
                    entry.0 += 1;
                }
            }
        }
        let optimal_accuracy_by_level = level_counts
            .into_iter()
            .map(|(level, (matched, claimed))| {
                (
                    level,
                    AccuracyCell {
                        matched_in_region: matched,
                        claimed_in_region: claimed,
                        accuracy: Some(matched as f64 / claimed as f64),
                    },
                )
            })
            .collect();
        Some(UpperBoundReport {
            internal_accuracy: best_count as f64 / samples.len() as f64,
            optimal_precision: naive_distribution(&optimal_errors).expect("samples non-empty"),
            optimal_accuracy_by_level,
        })
    } else {
        if options.include_upper_bound {
            notes.push(note_skipped("upper_bound", "no samples"));
        }
        None
    };

    Ok(AuditReport {
        provenance,
        ingest: ingest_summary,
        extent,
        precision,
        accuracy,
        anchor_correlation,
        temporal_stability,
        upper_bound,
        notes,
    })
}

// --- report comparison -----------------------------------------------------

const REL_TOLERANCE: f64 = 1e-9;
const ABS_FLOOR: f64 = 1e-12;

/// Field-by-field comparison: exact on integers, strings, and structure;
/// within 1e-9 relative on reals. Provenance is identification, not a
/// metric, and is skipped. Returns human-readable mismatch descriptions.
pub fn compare_reports(pipeline: &AuditReport, oracle: &AuditReport) -> Vec<String> {
    let a = serde_json::to_value(pipeline).expect("report serializes");
    let b = serde_json::to_value(oracle).expect("report serializes");
    let mut diffs = Vec::new();
    compare_value(&a, &b, "$", &mut diffs);
    diffs
}

fn compare_value(a: &Value, b: &Value, path: &str, diffs: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for key in ma.keys().chain(mb.keys().filter(|k| !ma.contains_key(*k))) {
                if path == "$" && key == "provenance" {
                    continue;
                }
                let child = format!("{path}.{key}");
                match (ma.get(key), mb.get(key)) {
                    (Some(va), Some(vb)) => compare_value(va, vb, &child, diffs),
                    (Some(_), None) => diffs.push(format!("{child}: missing in oracle")),
                    (None, Some(_)) => diffs.push(format!("{child}: missing in pipeline")),
                    (None, None) => unreachable!(),
                }
            }
        }
        (Value::Array(va), Value::Array(vb)) => {
            if va.len() != vb.len() {
                diffs.push(format!("{path}: length {} vs {}", va.len(), vb.len()));
                return;
            }
            for (i, (ea, eb)) in va.iter().zip(vb).enumerate() {
                compare_value(ea, eb, &format!("{path}[{i}]"), diffs);
            }
        }
        (Value::Number(na), Value::Number(nb)) => {
            let both_int = (na.is_i64() || na.is_u64()) && (nb.is_i64() || nb.is_u64());
            if both_int {
                if na.as_i64().or(na.as_u64().map(|u| u as i64))
                    != nb.as_i64().or(nb.as_u64().map(|u| u as i64))
                {
                    diffs.push(format!("{path}: {na} != {nb} (integer)"));
                }
            } else {
                let (x, y) = (na.as_f64().unwrap(), nb.as_f64().unwrap());
                let tol = ABS_FLOOR.max(REL_TOLERANCE * x.abs().max(y.abs()));
                if (x - y).abs() > tol {
                    diffs.push(format!("{path}: {x} != {y} (tol {tol:e})"));
                }
            }
        }
        _ => {
            if a != b {
                diffs.push(format!("{path}: {a} != {b}"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{run_audit, AuditPaths};
    use crate::synth::{generate_world, WorldConfig};

    fn world_options() -> AuditOptions {
        AuditOptions {
            grid_resolution: 7,
            ..AuditOptions::default()
        }
    }

    #[test]
    fn empty_event_worlds_match_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            seed: 3,
            n_anchors: 10,
            n_ranges: 50,
            n_events: 1,
            gap_event_fraction: 1.0, // the single event never joins
            bidstream: None,
            ..WorldConfig::default()
        };
        generate_world(&config, dir.path()).unwrap();
        let paths = AuditPaths::from_dir(dir.path());
        let provenance = Provenance::new(b"test", 3);
        let options = world_options();
        let pipeline = run_audit(&paths, &options, provenance.clone()).unwrap();
        let oracle = oracle_report(&paths, &options, provenance, OracleLimits::default()).unwrap();
        let diffs = compare_reports(&pipeline.report, &oracle);
        assert!(diffs.is_empty(), "{diffs:#?}");
        assert!(pipeline.report.notes.contains(&NOTE_NO_SAMPLES.to_string()));
        assert!(oracle.notes.contains(&NOTE_NO_SAMPLES.to_string()));
    }

    #[test]
    fn single_event_world_quantiles_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            seed: 4,
            n_anchors: 5,
            n_ranges: 20,
            n_events: 1,
            gap_event_fraction: 0.0,
            bidstream: None,
            ..WorldConfig::default()
        };
        generate_world(&config, dir.path()).unwrap();
        let paths = AuditPaths::from_dir(dir.path());
        let provenance = Provenance::new(b"test", 4);
        let options = world_options();
        let pipeline = run_audit(&paths, &options, provenance.clone()).unwrap();
        let oracle = oracle_report(&paths, &options, provenance, OracleLimits::default()).unwrap();
        assert!(compare_reports(&pipeline.report, &oracle).is_empty());
        let dist = &pipeline.report.precision["none"]["all"];
        assert_eq!(dist.sample_count, 1);
        let only = dist.quantiles["p50"];
        for (label, _) in QUANTILE_LABELS {
            assert_eq!(dist.quantiles[label], only);
        }
    }

    #[test]
    fn scale_guard_refuses_oversized_worlds() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            seed: 5,
            n_anchors: 10,
            n_ranges: 50,
            n_events: 30,
            bidstream: None,
            ..WorldConfig::default()
        };
        generate_world(&config, dir.path()).unwrap();
        let paths = AuditPaths::from_dir(dir.path());
        let err = oracle_report(
            &paths,
            &world_options(),
            Provenance::new(b"t", 5),
            OracleLimits {
                max_events: 10,
                max_regions: 1000,
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            OracleError::ScaleGuard { what: "events", .. }
        ));
    }

    #[test]
    fn comparison_flags_differences() {
        let dir = tempfile::tempdir().unwrap();
        let config = WorldConfig {
            seed: 6,
            n_anchors: 10,
            n_ranges: 60,
            n_events: 40,
            bidstream: None,
            ..WorldConfig::default()
        };
        generate_world(&config, dir.path()).unwrap();
        let paths = AuditPaths::from_dir(dir.path());
        let provenance = Provenance::new(b"t", 6);
        let options = world_options();
        let mut pipeline = run_audit(&paths, &options, provenance.clone()).unwrap();
        let oracle = oracle_report(&paths, &options, provenance, OracleLimits::default()).unwrap();
        assert!(compare_reports(&pipeline.report, &oracle).is_empty());
        // Perturb one count and expect a diff.
        pipeline.report.ingest.matched += 1;
        let diffs = compare_reports(&pipeline.report, &oracle);
        assert!(diffs.iter().any(|d| d.contains("matched")), "{diffs:?}");
    }
}

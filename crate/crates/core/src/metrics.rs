//! Aggregate metrics over joined samples: error distributions, in-region
//! accuracy, anchor-density correlation, and day-over-day stability.

use crate::events::JoinedSample;
use crate::geo::cell_of;
use crate::ip::AnchorSet;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Geo(#[from] crate::geo::GeoError),
}

/// Dimensions samples can be grouped by. `None` is the ungrouped overall
/// view, reported under the single group value "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Country,
    Urbanization,
    ConnType,
    Carrier,
    None,
}

pub const ALL_DIMENSIONS: [Dimension; 5] = [
    Dimension::Country,
    Dimension::Urbanization,
    Dimension::ConnType,
    Dimension::Carrier,
    Dimension::None,
];

impl Dimension {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Country => "country",
            Dimension::Urbanization => "urbanization",
            Dimension::ConnType => "conn_type",
            Dimension::Carrier => "carrier",
            Dimension::None => "none",
        }
    }

    /// The group value a sample contributes to under this dimension.
    pub fn value_of(&self, sample: &JoinedSample) -> String {
        match self {
            Dimension::Country => sample.event.country.clone(),
            Dimension::Urbanization => sample.urbanization.as_str().to_string(),
            Dimension::ConnType => sample.conn_type.as_str().to_string(),
            Dimension::Carrier => sample.event.carrier.clone(),
            Dimension::None => "all".to_string(),
        }
    }
}

/// A (dimension, value) pair identifying one sample group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub dimension: Dimension,
    pub value: String,
}

pub const QUANTILE_LABELS: [(&str, f64); 9] = [
    ("p1", 0.01),
    ("p5", 0.05),
    ("p10", 0.10),
    ("p25", 0.25),
    ("p50", 0.50),
    ("p75", 0.75),
    ("p90", 0.90),
    ("p95", 0.95),
    ("p99", 0.99),
];

/// Exact quantile with linear interpolation between closest ranks
/// (the common "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty set");
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

/// Log-spaced CDF support points: ten per decade from 0.01 km to 10^4 km.
/// When the data exceeds the last support, the maximum value is appended so
/// the reported CDF always ends at 1.
pub fn cdf_supports(max_value: f64) -> Vec<f64> {
    let mut supports: Vec<f64> = (0..=60)
        .map(|i| 10f64.powf(-2.0 + i as f64 * 0.1))
        .collect();
    if max_value > *supports.last().unwrap() {
        supports.push(max_value);
    }
    supports
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfPoint {
    pub distance_km: f64,
    pub cumulative_fraction: f64,
}

/// Summary of an error distribution: exact quantiles plus a fixed-grid CDF.
#[derive(Debug, Clone, Serialize)]
pub struct PrecisionDistribution {
    pub sample_count: usize,
    pub quantiles: BTreeMap<String, f64>,
    pub cdf: Vec<CdfPoint>,
}

impl PrecisionDistribution {
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
        let quantiles = QUANTILE_LABELS
            .iter()
            .map(|&(label, q)| (label.to_string(), quantile_sorted(&sorted, q)))
            .collect();
        let n = sorted.len() as f64;
        let cdf = cdf_supports(*sorted.last().unwrap())
            .into_iter()
            .map(|support| {
                let below = sorted.partition_point(|&e| e <= support);
                CdfPoint {
                    distance_km: support,
                    cumulative_fraction: below as f64 / n,
                }
            })
            .collect();
        Some(PrecisionDistribution {
            sample_count: sorted.len(),
            quantiles,
            cdf,
        })
    }

    pub fn median(&self) -> f64 {
        self.quantiles["p50"]
    }
}

/// Error distributions per group of one dimension. Groups arise from
/// observed values, so every reported group is non-empty; an empty sample
/// set yields an empty map.
pub fn precision_distribution(
    samples: &[JoinedSample],
    dimension: Dimension,
) -> BTreeMap<String, PrecisionDistribution> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for sample in samples {
        groups
            .entry(dimension.value_of(sample))
            .or_default()
            .push(sample.error_km);
    }
    groups
        .into_iter()
        .filter_map(|(value, errors)| {
            PrecisionDistribution::from_errors(&errors).map(|d| (value, d))
        })
        .collect()
}

/// One accuracy measurement: of the samples the database places inside
/// some region of the level, how many truly are in that region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyCell {
    pub matched_in_region: usize,
    pub claimed_in_region: usize,
    /// matched / claimed; absent when nothing was claimed at this level.
    pub accuracy: Option<f64>,
}

impl AccuracyCell {
    fn from_counts(matched: usize, claimed: usize) -> Self {
        let accuracy = (claimed > 0).then(|| matched as f64 / claimed as f64);
        AccuracyCell {
            matched_in_region: matched,
            claimed_in_region: claimed,
            accuracy,
        }
    }
}

/// In-region accuracy at one administrative level, micro-averaged over all
/// regions of the level and split by the grouping dimension. A sample
/// counts as claimed when its database position falls in some region of
/// the level, and as matched when its true position falls in the same
/// region.
pub fn accuracy(
    samples: &[JoinedSample],
    level: u8,
    dimension: Dimension,
) -> BTreeMap<String, AccuracyCell> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for sample in samples {
        let claimed_region = sample
            .ip_region_by_level
            .get(&level)
            .and_then(|r| r.as_ref());
        let Some(claimed_region) = claimed_region else {
            continue;
        };
        let entry = counts.entry(dimension.value_of(sample)).or_default();
        entry.1 += 1;
        let gt_region = sample
            .gt_region_by_level
            .get(&level)
            .and_then(|r| r.as_ref());
        if gt_region == Some(claimed_region) {
            entry.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(value, (matched, claimed))| (value, AccuracyCell::from_counts(matched, claimed)))
        .collect()
}

/// Two-pass Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
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

/// Result of correlating per-cell median error against per-cell anchor
/// counts, both on log10 scale.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    /// Pearson R over usable cells; absent when a side has zero variance.
    pub r: Option<f64>,
    pub cells_used: usize,
    pub cells_excluded_no_anchor: usize,
    pub cells_excluded_nonpositive_median: usize,
}

/// Correlate per-cell median error with per-cell anchor density. Cells
/// with no anchors, or a non-positive median error, have no log value and
/// are excluded; the exclusion counts are reported.
pub fn anchor_density_correlation(
    samples: &[JoinedSample],
    anchors: &AnchorSet,
    resolution: u8,
) -> Result<CorrelationReport, MetricsError> {
    let mut errors_by_cell: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for sample in samples {
        let cell = cell_of(sample.event.pos_gt, resolution)?;
        errors_by_cell
            .entry(cell.index)
            .or_default()
            .push(sample.error_km);
    }
    let mut anchors_by_cell: BTreeMap<u64, usize> = BTreeMap::new();
    for anchor in &anchors.anchors {
        let cell = cell_of(*anchor, resolution)?;
        *anchors_by_cell.entry(cell.index).or_insert(0) += 1;
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut no_anchor = 0usize;
    let mut nonpositive = 0usize;
    for (cell, mut errors) in errors_by_cell {
        let anchor_count = anchors_by_cell.get(&cell).copied().unwrap_or(0);
        if anchor_count == 0 {
            no_anchor += 1;
            continue;
        }
        errors.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
        let median = quantile_sorted(&errors, 0.5);
        if median <= 0.0 {
            nonpositive += 1;
            continue;
        }
        xs.push(median.log10());
        ys.push((anchor_count as f64).log10());
    }

    if xs.len() < 2 {
        return Err(MetricsError::InsufficientData {
            what: "cells with both a positive median error and an anchor",
            needed: 2,
            got: xs.len(),
        });
    }

    Ok(CorrelationReport {
        r: pearson(&xs, &ys),
        cells_used: xs.len(),
        cells_excluded_no_anchor: no_anchor,
        cells_excluded_nonpositive_median: nonpositive,
    })
}

/// Day-over-day stability of the median error. The variance is the
/// population variance of the per-day medians; it is reported both on the
/// km values (km^2) and on the same medians expressed in meters (m^2).
#[derive(Debug, Clone, Serialize)]
pub struct TemporalStability {
    pub daily_median_km: BTreeMap<i64, f64>,
    pub variance_km2: f64,
    pub variance_m2: f64,
}

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Partition samples into UTC days and measure how much the daily median
/// error moves. At least two days are required.
pub fn temporal_stability(samples: &[JoinedSample]) -> Result<TemporalStability, MetricsError> {
    let mut by_day: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for sample in samples {
        by_day
            .entry(sample.event.timestamp.div_euclid(SECONDS_PER_DAY))
            .or_default()
            .push(sample.error_km);
    }
    if by_day.len() < 2 {
        return Err(MetricsError::InsufficientData {
            what: "days with samples",
            needed: 2,
            got: by_day.len(),
        });
    }
    let daily_median_km: BTreeMap<i64, f64> = by_day
        .into_iter()
        .map(|(day, mut errors)| {
            errors.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
            (day, quantile_sorted(&errors, 0.5))
        })
        .collect();
    let medians: Vec<f64> = daily_median_km.values().copied().collect();
    let variance_km2 = population_variance(&medians);
    let meters: Vec<f64> = medians.iter().map(|m| m * 1000.0).collect();
    Ok(TemporalStability {
        daily_median_km,
        variance_km2,
        variance_m2: population_variance(&meters),
    })
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{LocationEvent, Urbanization};
    use crate::geo::GeoPoint;
    use crate::ip::ConnType;
    use proptest::prelude::*;
    use std::collections::BTreeMap as Map;

    fn sample(error_km: f64) -> JoinedSample {
        sample_at(error_km, 0, 40.0, -3.0)
    }

    fn sample_at(error_km: f64, ts: i64, lat: f64, lon: f64) -> JoinedSample {
        JoinedSample {
            event: LocationEvent {
                timestamp: ts,
                pos_gt: GeoPoint { lat, lon },
                ip: crate::ip::IpAddress(0x01000001),
                carrier: "carrier_a".to_string(),
                country: "ES".to_string(),
            },
            pos_ip: GeoPoint { lat, lon },
            error_km,
            conn_type: ConnType::Fixed,
            urbanization: Urbanization::Unknown,
            gt_region_by_level: Map::new(),
            ip_region_by_level: Map::new(),
        }
    }

    fn with_regions(
        mut s: JoinedSample,
        level: u8,
        gt: Option<&str>,
        ip: Option<&str>,
    ) -> JoinedSample {
        s.gt_region_by_level.insert(level, gt.map(str::to_string));
        s.ip_region_by_level.insert(level, ip.map(str::to_string));
        s
    }

    #[test]
    fn constant_distribution_has_constant_quantiles() {
        let samples: Vec<JoinedSample> = (0..50).map(|_| sample(5.0)).collect();
        let dist = precision_distribution(&samples, Dimension::None);
        let all = &dist["all"];
        for (label, _) in QUANTILE_LABELS {
            assert_eq!(all.quantiles[label], 5.0);
        }
        assert_eq!(all.sample_count, 50);
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let samples: Vec<JoinedSample> = (1..=100).map(|i| sample(i as f64 * 0.7)).collect();
        let dist = precision_distribution(&samples, Dimension::None);
        let cdf = &dist["all"].cdf;
        for pair in cdf.windows(2) {
            assert!(pair[0].cumulative_fraction <= pair[1].cumulative_fraction);
            assert!(pair[0].distance_km < pair[1].distance_km);
        }
        assert_eq!(cdf.last().unwrap().cumulative_fraction, 1.0);
    }

    #[test]
    fn cdf_extends_past_last_support_when_needed() {
        let samples = vec![sample(15000.0), sample(1.0)];
        let dist = precision_distribution(&samples, Dimension::None);
        let cdf = &dist["all"].cdf;
        assert_eq!(cdf.last().unwrap().distance_km, 15000.0);
        assert_eq!(cdf.last().unwrap().cumulative_fraction, 1.0);
    }

    #[test]
    fn accuracy_trivial_cases() {
        let all_matched: Vec<JoinedSample> = (0..10)
            .map(|_| with_regions(sample(1.0), 2, Some("r1"), Some("r1")))
            .collect();
        let report = accuracy(&all_matched, 2, Dimension::None);
        assert_eq!(report["all"].accuracy, Some(1.0));

        let none_matched: Vec<JoinedSample> = (0..10)
            .map(|_| with_regions(sample(1.0), 2, Some("r2"), Some("r1")))
            .collect();
        let report = accuracy(&none_matched, 2, Dimension::None);
        assert_eq!(report["all"].accuracy, Some(0.0));
        assert_eq!(report["all"].claimed_in_region, 10);
    }

    #[test]
    fn accuracy_ignores_unclaimed_samples() {
        let samples = vec![
            with_regions(sample(1.0), 2, Some("r1"), None),
            with_regions(sample(1.0), 2, Some("r1"), Some("r1")),
        ];
        let report = accuracy(&samples, 2, Dimension::None);
        assert_eq!(report["all"].claimed_in_region, 1);
        assert_eq!(report["all"].matched_in_region, 1);
        // No sample claimed at an unknown level: group absent entirely.
        assert!(accuracy(&samples, 3, Dimension::None).is_empty());
    }

    #[test]
    fn perfect_log_linear_anticorrelation() {
        // Cell i holds 2^i anchors and a median error of k / 2^i, which is
        // exactly linear in log space with negative slope.
        let res = 4u8;
        let mut samples = Vec::new();
        let mut anchor_points = Vec::new();
        for i in 1..=6u32 {
            // One grid cell per i: spread along longitude, ~22.5 deg apart.
            let lon = -170.0 + i as f64 * 22.5;
            for _ in 0..3 {
                samples.push(sample_at(100.0 / f64::from(2u32.pow(i)), 0, 10.0, lon));
            }
            for a in 0..2u32.pow(i) {
                anchor_points.push(GeoPoint {
                    lat: 10.0 + (a as f64) * 1e-4,
                    lon,
                });
            }
        }
        let anchors = AnchorSet::from_anchors(anchor_points.into_iter()).unwrap();
        let report = anchor_density_correlation(&samples, &anchors, res).unwrap();
        assert_eq!(report.cells_used, 6);
        let r = report.r.unwrap();
        assert!((r - (-1.0)).abs() < 1e-9, "r = {r}");
    }

    #[test]
    fn constant_error_across_cells_has_no_correlation() {
        let mut samples = Vec::new();
        let mut anchor_points = Vec::new();
        for i in 0..4 {
            let lon = -100.0 + i as f64 * 25.0;
            samples.push(sample_at(5.0, 0, 10.0, lon));
            for a in 0..(i + 1) {
                anchor_points.push(GeoPoint {
                    lat: 10.0 + a as f64 * 1e-3,
                    lon,
                });
            }
        }
        let anchors = AnchorSet::from_anchors(anchor_points.into_iter()).unwrap();
        let report = anchor_density_correlation(&samples, &anchors, 4).unwrap();
        assert_eq!(report.r, None);
    }

    #[test]
    fn correlation_requires_two_usable_cells() {
        let samples = vec![sample_at(5.0, 0, 10.0, 10.0)];
        let anchors = AnchorSet::from_anchors(
            [GeoPoint {
                lat: 10.0,
                lon: 10.0,
            }]
            .into_iter(),
        )
        .unwrap();
        let err = anchor_density_correlation(&samples, &anchors, 4).unwrap_err();
        assert!(matches!(err, MetricsError::InsufficientData { .. }));
    }

    #[test]
    fn temporal_stability_arithmetic() {
        // Two days with medians 1 km and 3 km: population variance is 1.0.
        let samples = vec![
            sample_at(1.0, 100, 40.0, -3.0),
            sample_at(3.0, 100 + SECONDS_PER_DAY, 40.0, -3.0),
        ];
        let stability = temporal_stability(&samples).unwrap();
        assert_eq!(stability.variance_km2, 1.0);
        assert_eq!(stability.variance_m2, 1_000_000.0);
        assert_eq!(stability.daily_median_km.len(), 2);
    }

    #[test]
    fn identical_days_have_zero_variance() {
        let mut samples = Vec::new();
        for day in 0..5 {
            for e in [1.0, 2.0, 3.0] {
                samples.push(sample_at(e, day * SECONDS_PER_DAY + 10, 40.0, -3.0));
            }
        }
        let stability = temporal_stability(&samples).unwrap();
        assert_eq!(stability.variance_km2, 0.0);
    }

    #[test]
    fn single_day_is_insufficient() {
        let samples = vec![
            sample_at(1.0, 10, 40.0, -3.0),
            sample_at(2.0, 20, 40.0, -3.0),
        ];
        assert!(matches!(
            temporal_stability(&samples),
            Err(MetricsError::InsufficientData { .. })
        ));
    }

    #[test]
    fn grouping_by_conn_type_splits_samples() {
        let mut samples: Vec<JoinedSample> = (0..4).map(|_| sample(1.0)).collect();
        samples[2].conn_type = ConnType::Cellular;
        samples[3].conn_type = ConnType::Cellular;
        samples[2].error_km = 10.0;
        samples[3].error_km = 10.0;
        let dist = precision_distribution(&samples, Dimension::ConnType);
        assert_eq!(dist["fixed"].median(), 1.0);
        assert_eq!(dist["cellular"].median(), 10.0);
    }

    proptest! {
        #[test]
        fn quantiles_are_nondecreasing(mut errors in proptest::collection::vec(0.0f64..1e4, 1..300)) {
            errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut last = f64::NEG_INFINITY;
            for (_, q) in QUANTILE_LABELS {
                let v = quantile_sorted(&errors, q);
                prop_assert!(v >= last);
                last = v;
            }
        }

        #[test]
        fn group_medians_bracket_overall_median(
            errors_a in proptest::collection::vec(0.1f64..1e3, 1..100),
            errors_b in proptest::collection::vec(0.1f64..1e3, 1..100),
        ) {
            let mut samples: Vec<JoinedSample> = errors_a.iter().map(|&e| sample(e)).collect();
            for &e in &errors_b {
                let mut s = sample(e);
                s.conn_type = ConnType::Cellular;
                samples.push(s);
            }
            let by_group = precision_distribution(&samples, Dimension::ConnType);
            let overall = precision_distribution(&samples, Dimension::None);
            let group_medians: Vec<f64> = by_group.values().map(|d| d.median()).collect();
            let lo = group_medians.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = group_medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mid = overall["all"].median();
            prop_assert!(lo <= mid + 1e-12 && mid <= hi + 1e-12, "{lo} {mid} {hi}");
        }

        #[test]
        fn aggregates_are_order_invariant(
            errors in proptest::collection::vec(0.0f64..1e3, 2..200),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let samples: Vec<JoinedSample> = errors
                .iter()
                .enumerate()
                .map(|(i, &e)| sample_at(e, (i as i64 % 3) * SECONDS_PER_DAY, 40.0, -3.0))
                .collect();
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = precision_distribution(&samples, Dimension::None);
            let b = precision_distribution(&shuffled, Dimension::None);
            prop_assert_eq!(&a["all"].quantiles, &b["all"].quantiles);
            prop_assert_eq!(&a["all"].cdf, &b["all"].cdf);
        }
    }
}

//! Nearest-anchor analysis: how often the database picked the best
//! available anchor, and how good the mapping could be if every address
//! were reassigned to the anchor closest to its true position.
//!
//! Same-Voronoi-cell membership is evaluated through its dual: a sample
//! sits in its anchor's cell exactly when that anchor is the nearest one.

use crate::events::JoinedSample;
use crate::geo::{haversine_km, GeoPoint, EARTH_RADIUS_KM};
use crate::ip::AnchorSet;
use crate::metrics::{self, AccuracyCell, Dimension, PrecisionDistribution};
use crate::region::{RegionError, RegionIndex};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("no samples to analyze")]
    NoSamples,
    #[error("sample position {0} is not an anchor of this snapshot; samples and index disagree")]
    SampleNotAnchor(GeoPoint),
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Latitude-sorted anchor index answering exact nearest-anchor queries.
///
/// Queries sweep outward from the query latitude and prune once the
/// latitude difference alone exceeds the best distance found, which is a
/// valid bound because a great circle between two points is never shorter
/// than their latitude separation. Results equal an exhaustive scan,
/// including the lexicographic (lat, lon) tie rule.
#[derive(Debug)]
pub struct NearestAnchorIndex {
    anchors: Vec<GeoPoint>,
    members: HashSet<(u64, u64)>,
}

impl NearestAnchorIndex {
    pub fn build(set: &AnchorSet) -> Result<Self, AnchorError> {
        Self::from_points(set.anchors.clone())
    }

    /// Build from raw points; duplicates collapse and order is irrelevant.
    pub fn from_points(mut anchors: Vec<GeoPoint>) -> Result<Self, AnchorError> {
        if anchors.is_empty() {
            return Err(AnchorError::EmptyAnchorSet);
        }
        anchors.sort_by(|a, b| a.lex_cmp(b));
        anchors.dedup_by(|a, b| a.bits() == b.bits());
        let members = anchors.iter().map(|a| a.bits()).collect();
        Ok(NearestAnchorIndex { anchors, members })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.members.contains(&p.bits())
    }

    /// The anchor minimizing haversine distance to `p`; exact ties resolve
    /// to the lexicographically smaller (lat, lon).
    pub fn nearest(&self, p: GeoPoint) -> (GeoPoint, f64) {
        let mut best: Option<(f64, GeoPoint)> = None;
        let consider = |best: &mut Option<(f64, GeoPoint)>, candidate: GeoPoint| {
            let d = haversine_km(p, candidate);
            match best {
                None => *best = Some((d, candidate)),
                Some((bd, ba)) => {
                    if d < *bd || (d == *bd && candidate.lex_cmp(ba).is_lt()) {
                        *best = Some((d, candidate));
                    }
                }
            }
        };

        // Anchors are (lat, lon)-sorted, so walk outward by latitude.
        let start = self.anchors.partition_point(|a| a.lat < p.lat);
        let mut below = start.checked_sub(1);
        let mut above = (start < self.anchors.len()).then_some(start);
        loop {
            // Relaxed by 1e-9 so rounding in the distance computation can
            // never prune a same-longitude candidate that actually ties.
            let lower_bound = |a: &GeoPoint| {
                (a.lat - p.lat).abs().to_radians() * EARTH_RADIUS_KM * (1.0 - 1e-9)
            };
            // Prune a side when even its latitude gap is beyond the best;
            // equal bounds keep scanning so ties are still visited.
            if let (Some((bd, _)), Some(i)) = (&best, below) {
                if lower_bound(&self.anchors[i]) > *bd {
                    below = None;
                }
            }
            if let (Some((bd, _)), Some(i)) = (&best, above) {
                if lower_bound(&self.anchors[i]) > *bd {
                    above = None;
                }
            }
            let pick_below = match (below, above) {
                (None, None) => break,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (Some(b), Some(a)) => {
                    (self.anchors[b].lat - p.lat).abs() <= (self.anchors[a].lat - p.lat).abs()
                }
            };
            if pick_below {
                let i = below.unwrap();
                consider(&mut best, self.anchors[i]);
                below = i.checked_sub(1);
            } else {
                let i = above.unwrap();
                consider(&mut best, self.anchors[i]);
                above = (i + 1 < self.anchors.len()).then_some(i + 1);
            }
        }

        let (d, a) = best.expect("index is non-empty");
        (a, d)
    }
}

/// A sample's best-case reassignment: the anchor nearest its true position.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OptimalAssignment {
    pub pos_opt: GeoPoint,
    pub error_opt_km: f64,
}

/// Reassign every sample to the anchor nearest its true position. The
/// resulting error can never exceed the actual one, because the actual
/// anchor is itself a member of the searched set.
pub fn optimal_assignment(
    samples: &[JoinedSample],
    index: &NearestAnchorIndex,
) -> Vec<OptimalAssignment> {
    samples
        .par_iter()
        .map(|s| {
            let (pos_opt, error_opt_km) = index.nearest(s.event.pos_gt);
            OptimalAssignment {
                pos_opt,
                error_opt_km,
            }
        })
        .collect()
}

/// Fraction of samples whose assigned anchor already is the nearest anchor
/// to the true position. A sample whose position is not an anchor at all
/// indicates the samples and index come from different snapshots.
pub fn internal_accuracy(
    samples: &[JoinedSample],
    index: &NearestAnchorIndex,
) -> Result<f64, AnchorError> {
    if samples.is_empty() {
        return Err(AnchorError::NoSamples);
    }
    let mut best_possible = 0usize;
    for sample in samples {
        if !index.contains(sample.pos_ip) {
            return Err(AnchorError::SampleNotAnchor(sample.pos_ip));
        }
        let (nearest, _) = index.nearest(sample.event.pos_gt);
        if nearest.bits() == sample.pos_ip.bits() {
            best_possible += 1;
        }
    }
    Ok(best_possible as f64 / samples.len() as f64)
}

/// The best-case performance bundle: internal accuracy, the error
/// distribution after optimal reassignment, and per-level accuracy of the
/// reassigned samples.
#[derive(Debug, Clone, Serialize)]
pub struct UpperBoundReport {
    pub internal_accuracy: f64,
    pub optimal_precision: PrecisionDistribution,
    pub optimal_accuracy_by_level: BTreeMap<u8, AccuracyCell>,
}

/// Compute the upper-bound report, returning the per-sample assignments
/// alongside so callers can emit them without recomputing.
pub fn upper_bound_report(
    samples: &[JoinedSample],
    index: &NearestAnchorIndex,
    regions: &RegionIndex,
    levels: &[u8],
) -> Result<(UpperBoundReport, Vec<OptimalAssignment>), AnchorError> {
    let internal = internal_accuracy(samples, index)?;
    let assignments = optimal_assignment(samples, index);

    let reassigned: Vec<JoinedSample> = samples
        .iter()
        .zip(&assignments)
        .map(|(sample, opt)| -> Result<JoinedSample, AnchorError> {
            let mut ip_region_by_level = BTreeMap::new();
            for &level in levels {
                ip_region_by_level.insert(
                    level,
                    regions.region_of(opt.pos_opt, level)?.map(str::to_string),
                );
            }
            let mut s = sample.clone();
            s.pos_ip = opt.pos_opt;
            s.error_km = opt.error_opt_km;
            s.ip_region_by_level = ip_region_by_level;
            Ok(s)
        })
        .collect::<Result<_, _>>()?;

    let optimal_precision = PrecisionDistribution::from_errors(
        &reassigned.iter().map(|s| s.error_km).collect::<Vec<_>>(),
    )
    .ok_or(AnchorError::NoSamples)?;

    let mut optimal_accuracy_by_level = BTreeMap::new();
    for &level in levels {
        if let Some(cell) = metrics::accuracy(&reassigned, level, Dimension::None).remove("all") {
            optimal_accuracy_by_level.insert(level, cell);
        }
    }

    let report = UpperBoundReport {
        internal_accuracy: internal,
        optimal_precision,
        optimal_accuracy_by_level,
    };
    Ok((report, assignments))
}

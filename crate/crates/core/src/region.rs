//! Administrative regions: polygon storage, exact point-in-region tests,
//! and a grid-accelerated index for region lookups.
//!
//! The grid prefilter only narrows the candidate set; membership is always
//! decided by an even-odd ray cast, so index and brute-force lookups agree
//! on every point.

use crate::geo::{cell_of, CellId, GeoError, GeoPoint};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Administrative levels run from finest (1, zip-code scale) to coarsest
/// (5, country).
pub const MIN_ADMIN_LEVEL: u8 = 1;
pub const MAX_ADMIN_LEVEL: u8 = 5;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region {region}: ring is not closed (first vertex must equal last)")]
    UnclosedRing { region: String },
    #[error("region {region}: ring has {got} vertices, need at least 4")]
    RingTooShort { region: String, got: usize },
    #[error("region {region}: level {level} outside {MIN_ADMIN_LEVEL}..={MAX_ADMIN_LEVEL}")]
    BadLevel { region: String, level: u8 },
    #[error("region {region}: {source}")]
    BadCoordinate { region: String, source: GeoError },
    #[error("regions {first} and {second} both claim point {point} at level {level}")]
    Ambiguous {
        first: String,
        second: String,
        point: GeoPoint,
        level: u8,
    },
    #[error("no index built for level {0}")]
    LevelNotIndexed(u8),
    #[error("regions file is not a GeoJSON FeatureCollection")]
    NotFeatureCollection,
    #[error("invalid GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// A closed ring of vertices; first vertex equals the last.
pub type Ring = Vec<GeoPoint>;

/// One polygon: an exterior ring plus zero or more holes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

/// An administrative region at one level of the hierarchy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdminRegion {
    pub id: String,
    pub level: u8,
    pub country: String,
    pub polygons: Vec<Polygon>,
}

impl AdminRegion {
    pub fn validate(&self) -> Result<(), RegionError> {
        if !(MIN_ADMIN_LEVEL..=MAX_ADMIN_LEVEL).contains(&self.level) {
            return Err(RegionError::BadLevel {
                region: self.id.clone(),
                level: self.level,
            });
        }
        for poly in &self.polygons {
            for ring in std::iter::once(&poly.exterior).chain(poly.holes.iter()) {
                if ring.len() < 4 {
                    return Err(RegionError::RingTooShort {
                        region: self.id.clone(),
                        got: ring.len(),
                    });
                }
                let (first, last) = (ring[0], ring[ring.len() - 1]);
                if first.bits() != last.bits() {
                    return Err(RegionError::UnclosedRing {
                        region: self.id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Exact membership test: even-odd ray cast per polygon, any polygon
    /// containing the point makes it a member.
    pub fn contains(&self, p: GeoPoint) -> bool {
        self.polygons.iter().any(|poly| polygon_contains(poly, p))
    }

    /// Bounding box over every vertex as (lat_min, lat_max, lon_min, lon_max).
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut bbox = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for poly in &self.polygons {
            for ring in std::iter::once(&poly.exterior).chain(poly.holes.iter()) {
                for v in ring {
                    bbox.0 = bbox.0.min(v.lat);
                    bbox.1 = bbox.1.max(v.lat);
                    bbox.2 = bbox.2.min(v.lon);
                    bbox.3 = bbox.3.max(v.lon);
                }
            }
        }
        bbox
    }
}

/// Even-odd membership over exterior plus holes: an odd total crossing
/// count means inside (a point inside a hole crosses both rings evenly).
pub fn polygon_contains(poly: &Polygon, p: GeoPoint) -> bool {
    let mut inside = ring_crossings_odd(&poly.exterior, p);
    for hole in &poly.holes {
        inside ^= ring_crossings_odd(hole, p);
    }
    inside
}

/// Even-odd ray cast with the test ray heading due east. The half-open
/// `(y1 > y) != (y2 > y)` test plus the strict `x < x_intersect` test give
/// each boundary point exactly one owner: edges are owned by the region to
/// their east/north, so shared borders never produce double claims.
fn ring_crossings_odd(ring: &[GeoPoint], p: GeoPoint) -> bool {
    let mut odd = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                odd = !odd;
            }
        }
    }
    odd
}

/// Per-level grid index over a region set.
#[derive(Debug)]
pub struct RegionIndex {
    resolution: u8,
    regions: Vec<AdminRegion>,
    // level -> cell index -> candidate region positions
    cells: HashMap<u8, HashMap<u64, Vec<usize>>>,
}

impl RegionIndex {
    /// Build the index at a grid resolution. Every cell intersecting a
    /// region's bounding box lists that region as a candidate.
    pub fn build(regions: Vec<AdminRegion>, resolution: u8) -> Result<Self, RegionError> {
        let mut cells: HashMap<u8, HashMap<u64, Vec<usize>>> = HashMap::new();
        for (pos, region) in regions.iter().enumerate() {
            region.validate()?;
            let (lat_min, lat_max, lon_min, lon_max) = region.bounding_box();
            let level_cells = cells.entry(region.level).or_default();
            for cell in cells_covering_bbox(lat_min, lat_max, lon_min, lon_max, resolution)? {
                level_cells.entry(cell.index).or_default().push(pos);
            }
        }
        Ok(RegionIndex {
            resolution,
            regions,
            cells,
        })
    }

    pub fn resolution(&self) -> u8 {
        self.resolution
    }

    pub fn regions(&self) -> &[AdminRegion] {
        &self.regions
    }

    pub fn levels(&self) -> Vec<u8> {
        let mut levels: Vec<u8> = self.cells.keys().copied().collect();
        levels.sort_unstable();
        levels
    }

    pub fn regions_at_level(&self, level: u8) -> impl Iterator<Item = &AdminRegion> {
        self.regions.iter().filter(move |r| r.level == level)
    }

    /// Resolve the region containing `p` at `level`, or `None`. Two regions
    /// claiming the same point is a data defect and is surfaced as an error.
    pub fn region_of(&self, p: GeoPoint, level: u8) -> Result<Option<&str>, RegionError> {
        let level_cells = match self.cells.get(&level) {
            Some(c) => c,
            None => return Ok(None),
        };
        let cell = cell_of(p, self.resolution)?;
        let mut found: Option<usize> = None;
        if let Some(candidates) = level_cells.get(&cell.index) {
            for &pos in candidates {
                if self.regions[pos].contains(p) {
                    if let Some(prev) = found {
                        return Err(RegionError::Ambiguous {
                            first: self.regions[prev].id.clone(),
                            second: self.regions[pos].id.clone(),
                            point: p,
                            level,
                        });
                    }
                    found = Some(pos);
                }
            }
        }
        Ok(found.map(|pos| self.regions[pos].id.as_str()))
    }

    /// Candidate-list length for a cell; exposed for coverage tests.
    pub fn candidate_count(&self, level: u8, cell: CellId) -> usize {
        self.cells
            .get(&level)
            .and_then(|m| m.get(&cell.index))
            .map_or(0, |v| v.len())
    }
}

/// All grid cells whose bounds intersect the given bounding box.
fn cells_covering_bbox(
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    resolution: u8,
) -> Result<Vec<CellId>, GeoError> {
    let clamp = |lat: f64, lon: f64| GeoPoint {
        lat: lat.clamp(-90.0, 90.0),
        lon: lon.clamp(-180.0, 180.0),
    };
    let sw = cell_of(clamp(lat_min, lon_min), resolution)?;
    let ne = cell_of(clamp(lat_max, lon_max), resolution)?;
    let side = 1u64 << resolution;
    let (row_lo, col_lo) = (sw.index / side, sw.index % side);
    let (row_hi, col_hi) = (ne.index / side, ne.index % side);
    let mut out = Vec::new();
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            out.push(CellId {
                resolution,
                index: row * side + col,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// GeoJSON ingestion. Features carry `id`, `level` (1-5) and `country`
// properties; coordinates are lon,lat per the GeoJSON convention.

#[derive(Serialize, Deserialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<Feature>,
}

#[derive(Serialize, Deserialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: String,
    properties: FeatureProperties,
    geometry: Geometry,
}

#[derive(Serialize, Deserialize)]
struct FeatureProperties {
    id: String,
    level: u8,
    country: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum Geometry {
    Polygon {
        coordinates: Vec<Vec<[f64; 2]>>,
    },
    MultiPolygon {
        coordinates: Vec<Vec<Vec<[f64; 2]>>>,
    },
}

fn ring_from_coords(region: &str, coords: &[[f64; 2]]) -> Result<Ring, RegionError> {
    coords
        .iter()
        .map(|&[lon, lat]| {
            GeoPoint::new(lat, lon).map_err(|source| RegionError::BadCoordinate {
                region: region.to_string(),
                source,
            })
        })
        .collect()
}

fn polygon_from_coords(region: &str, rings: &[Vec<[f64; 2]>]) -> Result<Polygon, RegionError> {
    let mut iter = rings.iter();
    let exterior = match iter.next() {
        Some(r) => ring_from_coords(region, r)?,
        None => {
            return Err(RegionError::RingTooShort {
                region: region.to_string(),
                got: 0,
            })
        }
    };
    let holes = iter
        .map(|r| ring_from_coords(region, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon { exterior, holes })
}

/// Parse a GeoJSON FeatureCollection into validated regions.
pub fn regions_from_geojson(text: &str) -> Result<Vec<AdminRegion>, RegionError> {
    let fc: FeatureCollection = serde_json::from_str(text)?;
    if fc.kind != "FeatureCollection" {
        return Err(RegionError::NotFeatureCollection);
    }
    let mut regions = Vec::with_capacity(fc.features.len());
    for feature in &fc.features {
        let id = &feature.properties.id;
        let polygons = match &feature.geometry {
            Geometry::Polygon { coordinates } => vec![polygon_from_coords(id, coordinates)?],
            Geometry::MultiPolygon { coordinates } => coordinates
                .iter()
                .map(|poly| polygon_from_coords(id, poly))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let region = AdminRegion {
            id: id.clone(),
            level: feature.properties.level,
            country: feature.properties.country.clone(),
            polygons,
        };
        region.validate()?;
        regions.push(region);
    }
    Ok(regions)
}

/// Serialize regions back to a GeoJSON FeatureCollection.
pub fn regions_to_geojson(regions: &[AdminRegion]) -> String {
    let features = regions
        .iter()
        .map(|region| {
            let to_coords =
                |ring: &Ring| -> Vec<[f64; 2]> { ring.iter().map(|p| [p.lon, p.lat]).collect() };
            let polys: Vec<Vec<Vec<[f64; 2]>>> = region
                .polygons
                .iter()
                .map(|poly| {
                    std::iter::once(&poly.exterior)
                        .chain(poly.holes.iter())
                        .map(to_coords)
                        .collect()
                })
                .collect();
            let geometry = if polys.len() == 1 {
                Geometry::Polygon {
                    coordinates: polys.into_iter().next().unwrap(),
                }
            } else {
                Geometry::MultiPolygon { coordinates: polys }
            };
            Feature {
                kind: "Feature".to_string(),
                properties: FeatureProperties {
                    id: region.id.clone(),
                    level: region.level,
                    country: region.country.clone(),
                },
                geometry,
            }
        })
        .collect();
    let fc = FeatureCollection {
        kind: "FeatureCollection".to_string(),
        features,
    };
    serde_json::to_string_pretty(&fc).expect("feature collection serializes")
}

/// Convenience: a rectangular region from corner coordinates.
pub fn rect_region(
    id: &str,
    level: u8,
    country: &str,
    s: f64,
    n: f64,
    w: f64,
    e: f64,
) -> AdminRegion {
    let ring = vec![
        GeoPoint { lat: s, lon: w },
        GeoPoint { lat: s, lon: e },
        GeoPoint { lat: n, lon: e },
        GeoPoint { lat: n, lon: w },
        GeoPoint { lat: s, lon: w },
    ];
    AdminRegion {
        id: id.to_string(),
        level,
        country: country.to_string(),
        polygons: vec![Polygon {
            exterior: ring,
            holes: vec![],
        }],
    }
}

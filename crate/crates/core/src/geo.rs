//! Geographic primitives: points, great-circle distance, and the
//! equal-angle grid used to turn spatial joins into hash joins.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} out of range [-90, 90]")]
    LatOutOfRange(f64),
    #[error("longitude {0} out of range [-180, 180]")]
    LonOutOfRange(f64),
    #[error("coordinate is not finite")]
    NotFinite,
    #[error("malformed cell id {0:?}, expected \"<resolution>:<index>\"")]
    BadCellId(String),
    #[error("cell index {index} out of range for resolution {resolution}")]
    CellIndexOutOfRange { resolution: u8, index: u64 },
    #[error("grid resolution {0} too fine, maximum is {MAX_GRID_RESOLUTION}")]
    ResolutionTooFine(u8),
}

/// A WGS84-style latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NotFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LonOutOfRange(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    /// Bitwise coordinate key; used wherever exact-equality grouping of
    /// coordinates is required (anchor dedup, same-anchor tests).
    pub fn bits(&self) -> (u64, u64) {
        (self.lat.to_bits(), self.lon.to_bits())
    }

    /// Lexicographic (lat, lon) order; total because coordinates are finite.
    pub fn lex_cmp(&self, other: &GeoPoint) -> std::cmp::Ordering {
        self.lat
            .partial_cmp(&other.lat)
            .unwrap()
            .then(self.lon.partial_cmp(&other.lon).unwrap())
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance in kilometers between two points, on a sphere of
/// radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    if a.lat == b.lat && a.lon == b.lon {
        return 0.0;
    }
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * s.sqrt().min(1.0).asin() * EARTH_RADIUS_KM
}

/// Finest resolution accepted by [`cell_of`]; keeps 2^r * 2^r cell indices
/// well inside u64 and cell spans above f64 noise.
pub const MAX_GRID_RESOLUTION: u8 = 24;

/// A cell of the equal-angle grid at a given resolution. At resolution `r`
/// the globe is tiled into 2^r rows of 180/2^r degrees latitude by 2^r
/// columns of 360/2^r degrees longitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub resolution: u8,
    pub index: u64,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.resolution, self.index)
    }
}

impl FromStr for CellId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (res, idx) = s
            .split_once(':')
            .ok_or_else(|| GeoError::BadCellId(s.to_string()))?;
        let resolution: u8 = res
            .parse()
            .map_err(|_| GeoError::BadCellId(s.to_string()))?;
        let index: u64 = idx
            .parse()
            .map_err(|_| GeoError::BadCellId(s.to_string()))?;
        if resolution > MAX_GRID_RESOLUTION {
            return Err(GeoError::ResolutionTooFine(resolution));
        }
        let side = 1u64 << resolution;
        if index >= side * side {
            return Err(GeoError::CellIndexOutOfRange { resolution, index });
        }
        Ok(CellId { resolution, index })
    }
}

/// Number of rows (= columns) of the grid at a resolution.
fn grid_side(resolution: u8) -> u64 {
    1u64 << resolution
}

/// Map a point to its grid cell. Cells are half-open in both axes; the
/// north pole and the antimeridian fold into the last row/column so every
/// valid point has exactly one cell.
pub fn cell_of(p: GeoPoint, resolution: u8) -> Result<CellId, GeoError> {
    if resolution > MAX_GRID_RESOLUTION {
        return Err(GeoError::ResolutionTooFine(resolution));
    }
    let side = grid_side(resolution);
    let lat_span = 180.0 / side as f64;
    let lon_span = 360.0 / side as f64;
    let row = (((p.lat + 90.0) / lat_span).floor() as i64).clamp(0, side as i64 - 1) as u64;
    let col = (((p.lon + 180.0) / lon_span).floor() as i64).clamp(0, side as i64 - 1) as u64;
    Ok(CellId {
        resolution,
        index: row * side + col,
    })
}

/// Bounds of a cell as (lat_min, lat_max, lon_min, lon_max). Cells own
/// their southern and western edges.
pub fn cell_bounds(cell: CellId) -> (f64, f64, f64, f64) {
    let side = grid_side(cell.resolution);
    let lat_span = 180.0 / side as f64;
    let lon_span = 360.0 / side as f64;
    let row = cell.index / side;
    let col = cell.index % side;
    let lat_min = -90.0 + row as f64 * lat_span;
    let lon_min = -180.0 + col as f64 * lon_span;
    (lat_min, lat_min + lat_span, lon_min, lon_min + lon_span)
}

/// Destination point at `distance_km` from `origin` along an initial
/// bearing, on the same sphere as [`haversine_km`].
pub fn destination(origin: GeoPoint, bearing_rad: f64, distance_km: f64) -> GeoPoint {
    let delta = distance_km / EARTH_RADIUS_KM;
    let lat1 = origin.lat.to_radians();
    let lon1 = origin.lon.to_radians();
    let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * bearing_rad.cos()).asin();
    let lon2 = lon1
        + (bearing_rad.sin() * delta.sin() * lat1.cos())
            .atan2(delta.cos() - lat1.sin() * lat2.sin());
    let lat = lat2.to_degrees().clamp(-90.0, 90.0);
    let mut lon = lon2.to_degrees();
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint { lat, lon }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_identity_is_zero() {
        assert_eq!(haversine_km(p(40.0, -3.0), p(40.0, -3.0)), 0.0);
    }

    #[test]
    fn haversine_antipodal_is_half_circumference() {
        let d = haversine_km(p(0.0, 0.0), p(0.0, 180.0));
        let half = std::f64::consts::PI * EARTH_RADIUS_KM;
        assert!((d - half).abs() < 1e-6, "{d} vs {half}");
        assert!((d - 20015.1).abs() < 0.1);
    }

    #[test]
    fn haversine_is_symmetric() {
        let a = p(40.4, -3.7);
        let b = p(41.4, 2.2);
        assert_eq!(haversine_km(a, b), haversine_km(b, a));
    }

    #[test]
    fn one_degree_of_latitude() {
        let d = haversine_km(p(40.0, -3.0), p(41.0, -3.0));
        let expected = EARTH_RADIUS_KM * 1f64.to_radians();
        assert!((d - expected).abs() < 1e-9);
        assert!((d - 111.19).abs() < 0.01);
    }

    #[test]
    fn point_validation() {
        assert_eq!(GeoPoint::new(95.0, 0.0), Err(GeoError::LatOutOfRange(95.0)));
        assert_eq!(
            GeoPoint::new(0.0, 190.0),
            Err(GeoError::LonOutOfRange(190.0))
        );
        assert_eq!(GeoPoint::new(f64::NAN, 0.0), Err(GeoError::NotFinite));
        assert!(GeoPoint::new(90.0, 180.0).is_ok());
    }

    #[test]
    fn cell_of_origin_at_r1() {
        // At r=1 the cell containing (0,0) spans lat [0,90) and lon [0,180).
        let cell = cell_of(p(0.0, 0.0), 1).unwrap();
        let (lat_min, lat_max, lon_min, lon_max) = cell_bounds(cell);
        assert_eq!((lat_min, lat_max), (0.0, 90.0));
        assert_eq!((lon_min, lon_max), (0.0, 180.0));
    }

    #[test]
    fn cell_of_is_deterministic() {
        let a = cell_of(p(40.4, -3.7), 9).unwrap();
        let b = cell_of(p(40.4, -3.7), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poles_and_antimeridian_fold_into_last_cells() {
        let side = 1u64 << 3;
        let north = cell_of(p(90.0, 0.0), 3).unwrap();
        assert_eq!(north.index / side, side - 1);
        let east = cell_of(p(0.0, 180.0), 3).unwrap();
        assert_eq!(east.index % side, side - 1);
    }

    #[test]
    fn cell_id_text_round_trip() {
        let cell = cell_of(p(40.4, -3.7), 9).unwrap();
        let parsed: CellId = cell.to_string().parse().unwrap();
        assert_eq!(parsed, cell);
        assert!("9".parse::<CellId>().is_err());
        assert!("9:99999999999999999999".parse::<CellId>().is_err());
    }

    #[test]
    fn cell_bounds_contain_point_at_volume() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(66);
        for _ in 0..100_000 {
            let point = p(rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0));
            let cell = cell_of(point, 6).unwrap();
            let (lat_min, lat_max, lon_min, lon_max) = cell_bounds(cell);
            assert!(lat_min <= point.lat && point.lat < lat_max);
            assert!(lon_min <= point.lon && point.lon < lon_max);
        }
    }

    // Independent great-circle oracle: spherical law of cosines.
    fn law_of_cosines_km(a: GeoPoint, b: GeoPoint) -> f64 {
        let lat1 = a.lat.to_radians();
        let lat2 = b.lat.to_radians();
        let dlon = (b.lon - a.lon).to_radians();
        let c = (lat1.sin() * lat2.sin() + lat1.cos() * lat2.cos() * dlon.cos()).clamp(-1.0, 1.0);
        c.acos() * EARTH_RADIUS_KM
    }

    proptest! {
        #[test]
        fn haversine_matches_law_of_cosines(
            lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0,
            lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0,
        ) {
            let a = p(lat1, lon1);
            let b = p(lat2, lon2);
            let hav = haversine_km(a, b);
            let loc = law_of_cosines_km(a, b);
            if hav > 1.0 {
                prop_assert!((hav - loc).abs() / hav < 1e-6, "hav={hav} loc={loc}");
            }
        }

        #[test]
        fn haversine_triangle_inequality(
            lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0,
            lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0,
            lat3 in -89.0f64..89.0, lon3 in -179.0f64..179.0,
        ) {
            let a = p(lat1, lon1);
            let b = p(lat2, lon2);
            let c = p(lat3, lon3);
            prop_assert!(haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9);
        }

        #[test]
        fn cell_bounds_contain_point(
            lat in -90.0f64..90.0, lon in -180.0f64..180.0,
            res in 0u8..12,
        ) {
            let point = p(lat, lon);
            let cell = cell_of(point, res).unwrap();
            let (lat_min, lat_max, lon_min, lon_max) = cell_bounds(cell);
            prop_assert!(lat_min <= point.lat && point.lat < lat_max + 1e-12);
            prop_assert!(lon_min <= point.lon && point.lon < lon_max + 1e-12);
        }

        #[test]
        fn destination_distance_matches(
            lat in -60.0f64..60.0, lon in -170.0f64..170.0,
            bearing in 0.0f64..std::f64::consts::TAU,
            dist in 0.1f64..500.0,
        ) {
            let origin = p(lat, lon);
            let dest = destination(origin, bearing, dist);
            let measured = haversine_km(origin, dest);
            prop_assert!((measured - dist).abs() < 1e-6 * dist.max(1.0),
                "planted {dist} measured {measured}");
        }
    }
}

//! Geodetic fixes, the local planar frame, and along-row offsets.
//!
//! Rows run East–West, so the along-row axis is local `x` (east positive).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Fixes farther than this from the projection origin are rejected.
pub const MAX_ORIGIN_SPAN_DEG: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub lat: f64,
    pub lon: f64,
    /// Seconds on a monotonic epoch.
    pub t: f64,
}

impl GeoFix {
    pub fn new(lat: f64, lon: f64, t: f64) -> Result<Self> {
        let f = Self { lat, lon, t };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return invalid(format!("latitude {} outside [-90, 90]", self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return invalid(format!("longitude {} outside [-180, 180]", self.lon));
        }
        if !self.t.is_finite() {
            return invalid("fix timestamp is not finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    /// Meters east of the origin.
    pub x: f64,
    /// Meters north of the origin.
    pub y: f64,
}

impl LocalPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &LocalPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection of one fix about `origin`.
pub fn project_point(fix: &GeoFix, origin: &GeoFix) -> Result<LocalPoint> {
    fix.validate()?;
    origin.validate()?;
    if (fix.lat - origin.lat).abs() > MAX_ORIGIN_SPAN_DEG
        || (fix.lon - origin.lon).abs() > MAX_ORIGIN_SPAN_DEG
    {
        return invalid(format!(
            "fix ({}, {}) is more than {MAX_ORIGIN_SPAN_DEG}° from the origin",
            fix.lat, fix.lon
        ));
    }
    let lat0 = origin.lat.to_radians();
    Ok(LocalPoint {
        x: EARTH_RADIUS_M * lat0.cos() * (fix.lon - origin.lon).to_radians(),
        y: EARTH_RADIUS_M * (fix.lat - origin.lat).to_radians(),
    })
}

pub fn project_to_local(fixes: &[GeoFix], origin: &GeoFix) -> Result<Vec<LocalPoint>> {
    fixes.iter().map(|f| project_point(f, origin)).collect()
}

/// Inverse of [`project_point`]: `(lat, lon)` in degrees.
pub fn unproject(p: &LocalPoint, origin: &GeoFix) -> (f64, f64) {
    let lat0 = origin.lat.to_radians();
    let lat = origin.lat + (p.y / EARTH_RADIUS_M).to_degrees();
    let lon = origin.lon + (p.x / (EARTH_RADIUS_M * lat0.cos())).to_degrees();
    (lat, lon)
}

/// Signed east–west distance from `a` to `b`.
pub fn along_row_offset(a: &LocalPoint, b: &LocalPoint) -> f64 {
    b.x - a.x
}

/// Great-circle distance in meters.
pub fn haversine_m(a: &GeoFix, b: &GeoFix) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Mean latitude/longitude of a set of fixes, used as a projection origin.
pub fn centroid(fixes: &[GeoFix]) -> Option<GeoFix> {
    if fixes.is_empty() {
        return None;
    }
    let n = fixes.len() as f64;
    Some(GeoFix {
        lat: fixes.iter().map(|f| f.lat).sum::<f64>() / n,
        lon: fixes.iter().map(|f| f.lon).sum::<f64>() / n,
        t: 0.0,
    })
}

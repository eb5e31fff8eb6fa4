//! Geodesy primitives: spherical coordinates, great-circle distance, and
//! spherical means.
//!
//! All distances assume a spherical Earth with the IUGG mean radius. Points
//! are stored as degrees and converted to 3D unit vectors for any math that
//! has to be dateline- and pole-safe.

use thiserror::Error;

/// IUGG mean Earth radius in kilometres. Every range threshold in the
/// pipeline is expressed against this constant.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("spherical mean undefined: resultant norm {0:e} below 1e-9")]
    DegenerateMean(f64),
}

/// A 3D vector; used for points on the unit sphere and their sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> Self {
        Self {
            x: self.y * other.z - self.z * other.y,
            y: self.z * other.x - self.x * other.z,
            z: self.x * other.y - self.y * other.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    /// Returns `None` when the norm is below `1e-12`.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n < 1e-12 {
            None
        } else {
            Some(self.scale(1.0 / n))
        }
    }
}

/// A location on the sphere. Latitude is a closed interval `[-90, 90]`;
/// longitude is half-open `[-180, 180)` with `+180` normalized to `-180`
/// at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::LatitudeOutOfRange(lat_deg));
        }
        if !(-180.0..=180.0).contains(&lon_deg) {
            return Err(GeoError::LongitudeOutOfRange(lon_deg));
        }
        let lon_deg = if lon_deg == 180.0 { -180.0 } else { lon_deg };
        Ok(Self { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    /// The unit vector `(cos lat cos lon, cos lat sin lon, sin lat)`.
    pub fn unit_vector(&self) -> Vec3 {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
    }

    /// Converts a direction back to latitude/longitude. The input does not
    /// have to be unit length, only nonzero.
    pub fn from_unit_vector(v: Vec3) -> Result<Self, GeoError> {
        let u = v.normalized().ok_or(GeoError::NonFinite)?;
        let lat = u.z.clamp(-1.0, 1.0).asin().to_degrees();
        let lon = u.y.atan2(u.x).to_degrees();
        Self::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0))
    }
}

/// Great-circle distance in kilometres via the vector `atan2` form, which
/// stays accurate for near-identical and near-antipodal pairs alike.
pub fn gcd_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let ua = a.unit_vector();
    let ub = b.unit_vector();
    let angle = ua.cross(ub).norm().atan2(ua.dot(ub));
    EARTH_RADIUS_KM * angle
}

/// The direction-space mean of a set of points: unit vectors are summed and
/// the resultant renormalized, so the result is dateline- and pole-safe.
///
/// Fails with [`GeoError::DegenerateMean`] when the resultant norm is below
/// `1e-9` (e.g. exact antipodes); callers must fall back to something else.
pub fn spherical_mean(points: &[GeoPoint]) -> Result<GeoPoint, GeoError> {
    let sum = points
        .iter()
        .fold(Vec3::new(0.0, 0.0, 0.0), |acc, p| acc.add(p.unit_vector()));
    let n = sum.norm();
    if n < 1e-9 {
        return Err(GeoError::DegenerateMean(n));
    }
    GeoPoint::from_unit_vector(sum)
}

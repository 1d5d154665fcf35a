//! WGS-84 geodetic/ECEF conversion and the local East-North-Up frame.

use nalgebra::{Matrix3, Vector3};

/// WGS-84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Geodetic coordinates in degrees and meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geodetic {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl Geodetic {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Self {
        Self { lat_deg, lon_deg, alt_m }
    }

    pub fn to_ecef(&self) -> Vector3<f64> {
        let (slat, clat) = self.lat_deg.to_radians().sin_cos();
        let (slon, clon) = self.lon_deg.to_radians().sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        Vector3::new(
            (n + self.alt_m) * clat * clon,
            (n + self.alt_m) * clat * slon,
            (n * (1.0 - WGS84_E2) + self.alt_m) * slat,
        )
    }

    pub fn from_ecef(p: &Vector3<f64>) -> Self {
        let lon = p.y.atan2(p.x);
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
        let mut alt = 0.0;
        // Fixed-point iteration; converges to sub-mm in a handful of steps.
        for _ in 0..10 {
            let s = lat.sin();
            let n = WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt();
            alt = rho / lat.cos() - n;
            lat = p.z.atan2(rho * (1.0 - WGS84_E2 * n / (n + alt)));
        }
        Self { lat_deg: lat.to_degrees(), lon_deg: lon.to_degrees(), alt_m: alt }
    }
}

/// Rotation taking ECEF vectors into the local ENU frame at `origin`
/// (rows are the East, North and Up unit vectors).
pub fn ecef_to_enu_rotation(origin: &Vector3<f64>) -> Matrix3<f64> {
    let geo = Geodetic::from_ecef(origin);
    let (slat, clat) = geo.lat_deg.to_radians().sin_cos();
    let (slon, clon) = geo.lon_deg.to_radians().sin_cos();
    Matrix3::new(
        -slon,
        clon,
        0.0, //
        -slat * clon,
        -slat * slon,
        clat, //
        clat * clon,
        clat * slon,
        slat,
    )
}

/// ECEF position of a point offset by `enu` meters from `origin`.
pub fn enu_offset_to_ecef(origin: &Vector3<f64>, enu: &Vector3<f64>) -> Vector3<f64> {
    origin + ecef_to_enu_rotation(origin).transpose() * enu
}

/// ENU coordinates of `p` relative to `origin`.
pub fn ecef_to_enu(origin: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    ecef_to_enu_rotation(origin) * (p - origin)
}

/// Elevation angle (radians) of `target` seen from `origin`.
pub fn elevation(origin: &Vector3<f64>, target: &Vector3<f64>) -> f64 {
    let enu = ecef_to_enu(origin, target);
    (enu.z / enu.norm()).asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equator_prime_meridian() {
        let p = Geodetic::new(0.0, 0.0, 0.0).to_ecef();
        assert!((p - Vector3::new(WGS84_A, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn padua_distance_between_lab_and_square() {
        // Two points quoted in degrees about 1.7 km apart.
        let lab = Geodetic::new(45.408, 11.894, 30.0).to_ecef();
        let square = Geodetic::new(45.398, 11.876, 12.0).to_ecef();
        let d = (lab - square).norm();
        assert!((1600.0..1900.0).contains(&d), "{d}");
    }

    proptest! {
        #[test]
        fn geodetic_round_trip(lat in -89.0f64..89.0, lon in -179.0f64..179.0, alt in -100.0f64..20_000.0) {
            let g = Geodetic::new(lat, lon, alt);
            let back = Geodetic::from_ecef(&g.to_ecef());
            prop_assert!((back.lat_deg - lat).abs() < 1e-9);
            prop_assert!((back.lon_deg - lon).abs() < 1e-9);
            prop_assert!((back.alt_m - alt).abs() < 1e-5);
        }

        #[test]
        fn enu_rotation_is_orthonormal(lat in -89.0f64..89.0, lon in -179.0f64..179.0) {
            let r = ecef_to_enu_rotation(&Geodetic::new(lat, lon, 0.0).to_ecef());
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
        }
    }

    #[test]
    fn up_axis_points_to_zenith() {
        let origin = Geodetic::new(45.408, 11.894, 30.0).to_ecef();
        let above = Geodetic::new(45.408, 11.894, 1030.0).to_ecef();
        let enu = ecef_to_enu(&origin, &above);
        assert!((enu - Vector3::new(0.0, 0.0, 1000.0)).norm() < 1e-6);
        assert!((elevation(&origin, &above) - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }
}

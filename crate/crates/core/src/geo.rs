//! Great-circle distances between pricing nodes.

use crate::error::{Error, Result};

/// Mean Earth radius in statute miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.8;

/// Great-circle distance in miles between two (latitude, longitude) points
/// given in degrees. Rejects coordinates outside [-90, 90] x [-180, 180].
pub fn haversine_miles(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    for (lat, lon) in [(lat1, lon1), (lat2, lon2)] {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::invalid(format!(
                "coordinates out of range: ({lat}, {lon})"
            )));
        }
    }
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();

    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    // Clamp guards the sqrt against rounding just above 1 near antipodes.
    let c = 2.0 * a.sqrt().min(1.0).asin();
    Ok(EARTH_RADIUS_MILES * c)
}

//! Poisson point configurations on boxes and the normalized compensated
//! sums they induce on test functions.

use crate::dist;
use crate::error::{Error, Result};
use crate::geom::{BoxRegion, Points};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PointConfiguration {
    pub region: BoxRegion,
    pub intensity: f64,
    pub points: Points,
}

/// Homogeneous Poisson sample on a box: a Poisson count for the whole box,
/// then i.i.d. uniform placement. Deterministic given the stream state.
pub fn sample_poisson(
    region: &BoxRegion,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PointConfiguration> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
    }
    let d = region.dimension();
    let n = dist::sample_poisson_count(lambda * region.volume(), rng);
    let mut points = Points::with_capacity(d, n as usize);
    let mut buf = vec![0.0f64; d];
    for _ in 0..n {
        for (a, slot) in buf.iter_mut().enumerate() {
            let u: f64 = rng.gen();
            *slot = region.lower()[a] + region.side(a) * u;
        }
        points.push(&buf);
    }
    Ok(PointConfiguration { region: region.clone(), intensity: lambda, points })
}

/// Normalized compensated sum (sum of h over the points - lambda * int h) /
/// sqrt(lambda). The integral of h over the region is the caller's input.
pub fn compensated_integral(
    config: &PointConfiguration,
    h: impl Fn(&[f64]) -> f64,
    integral_h: f64,
) -> f64 {
    let sum: f64 = config.points.iter().map(&h).sum();
    (sum - config.intensity * integral_h) / config.intensity.sqrt()
}

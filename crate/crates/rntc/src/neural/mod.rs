//! From-scratch tensor and backprop stack for the two fixed architectures:
//! the residual main network evaluated inside the MPC, and the convolutional
//! hypernetwork that emits its parameter vector.

pub mod adam;
pub mod checkpoint;
pub mod hypernet;
pub mod loss;
pub mod mainnet;
pub mod train;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Whether the main network head is the positive residual (`ELU + 1`,
/// subtracted from the SDF) or a direct value estimate (identity output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Rntc,
    Ntc,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Rntc => "rntc",
            TrainMode::Ntc => "ntc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rntc" => Some(TrainMode::Rntc),
            "ntc" => Some(TrainMode::Ntc),
            _ => None,
        }
    }
}

/// Maps window states onto the main network input cube [-1, 1]^3:
/// x and y relative to the window center, theta wrapped to (-pi, pi] / pi.
#[derive(Debug, Clone, Copy)]
pub struct StateNormalizer {
    pub center: [f64; 2],
    pub half_window: f64,
}

impl StateNormalizer {
    pub fn new(center: [f64; 2], window_size: f64) -> Self {
        Self { center, half_window: 0.5 * window_size }
    }

    #[inline]
    pub fn normalize(&self, state: [f64; 3]) -> [f64; 3] {
        [
            (state[0] - self.center[0]) / self.half_window,
            (state[1] - self.center[1]) / self.half_window,
            wrap_angle(state[2]) / PI,
        ]
    }

    /// Diagonal of d(normalized)/d(world state).
    #[inline]
    pub fn grad_scale(&self) -> [f64; 3] {
        [1.0 / self.half_window, 1.0 / self.half_window, 1.0 / PI]
    }
}

/// Wrap an angle to (-pi, pi].
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) - (-0.1)).abs() < 1e-12);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
        for i in 0..100 {
            let t = -20.0 + 0.4 * i as f64;
            let w = wrap_angle(t);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((t - w) / (2.0 * PI)).round() * 2.0 * PI + w - t < 1e-9);
        }
    }

    #[test]
    fn normalizer_covers_window() {
        let n = StateNormalizer::new([2.0, -1.0], 8.0);
        let s = n.normalize([6.0, -5.0, PI / 2.0]);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], -1.0);
        assert_eq!(s[2], 0.5);
    }
}

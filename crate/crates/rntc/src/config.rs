//! Canonical problem scales and shared physical parameters.

use crate::hj::{ControlBounds, StateGrid};
use serde::{Deserialize, Serialize};

/// Problem scale. `Paper` is the canonical configuration (100x100 SDF input,
/// 100x100x30 state grid); `Desk` is a reduced configuration sized for CI
/// and the acceptance runs (32x32 input, 50x50x15 grid, smaller networks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    /// Side of the square x/y state grid.
    pub fn grid_n(self) -> usize {
        match self {
            Scale::Desk => 50,
            Scale::Paper => 100,
        }
    }

    /// Number of periodic heading cells.
    pub fn ntheta(self) -> usize {
        match self {
            Scale::Desk => 15,
            Scale::Paper => 30,
        }
    }

    /// Side of the square SDF raster fed to the hypernetwork.
    pub fn sdf_n(self) -> usize {
        match self {
            Scale::Desk => 32,
            Scale::Paper => 100,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Scale::Desk),
            "paper" => Some(Scale::Paper),
            _ => None,
        }
    }

    /// State grid over a window centered at `center`.
    pub fn state_grid(self, center: [f64; 2], window_size: f64) -> StateGrid {
        let n = self.grid_n();
        StateGrid::new(
            n,
            n,
            self.ntheta(),
            [center[0] - 0.5 * window_size, center[1] - 0.5 * window_size],
            window_size,
        )
    }
}

/// Physical parameters shared across modules.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Side of the square sensing window, meters.
    pub window_size: f64,
    /// Robot radius; obstacles are inflated by this amount.
    pub inflation: f64,
    /// Disk radius used for generated obstacles.
    pub obstacle_radius: f64,
    /// Largest obstacle count in generated training windows.
    pub max_obstacles: usize,
    /// Obstacle speed bound for generated data, m/s.
    pub max_speed: f64,
    /// Control/simulation sampling time, seconds.
    pub dt: f64,
    /// Gap between the two SDF channels (current and past), seconds.
    pub past_gap: f64,
    pub bounds: ControlBounds,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            window_size: 8.0,
            inflation: 0.3,
            obstacle_radius: 0.3,
            max_obstacles: 4,
            max_speed: 1.0,
            dt: 0.1,
            past_gap: 0.4,
            bounds: ControlBounds::default(),
        }
    }
}

/// FNV-1a over the canonical text form; embedded in output artifacts so a
/// result can be traced back to the exact configuration that produced it.
pub fn config_hash(echo: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in echo.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

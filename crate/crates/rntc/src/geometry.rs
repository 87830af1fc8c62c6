//! Disk-obstacle world model: analytic signed distance function,
//! constant-velocity prediction, and rasterization onto sensing-window grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp bound for the failure function, meters. Chosen larger than the
/// sensing-window half-diagonal so the clamp stays outside an 8x8 window.
pub const F_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid resolution must be positive, got {nx}x{ny}")]
    InvalidGrid { nx: usize, ny: usize },
}

/// Moving disk obstacle with constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    pub velocity: [f64; 2],
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64, velocity: [f64; 2]) -> Self {
        debug_assert!(radius > 0.0);
        Self { center, radius, velocity }
    }

    pub fn speed(&self) -> f64 {
        (self.velocity[0] * self.velocity[0] + self.velocity[1] * self.velocity[1]).sqrt()
    }
}

/// Obstacles observed inside a square sensing window at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub obstacles: Vec<Obstacle>,
    /// Window center in world coordinates (the robot position).
    pub window_center: [f64; 2],
    /// Side length of the square sensing region, meters.
    pub window_size: f64,
    pub timestamp: f64,
}

impl EnvironmentSnapshot {
    pub fn new(obstacles: Vec<Obstacle>, window_center: [f64; 2], window_size: f64) -> Self {
        Self { obstacles, window_center, window_size, timestamp: 0.0 }
    }

    /// Lower-left corner of the sensing window.
    pub fn origin(&self) -> [f64; 2] {
        [
            self.window_center[0] - 0.5 * self.window_size,
            self.window_center[1] - 0.5 * self.window_size,
        ]
    }
}

/// Signed distance to the union of inflated obstacle disks, clamped to
/// [-F_MAX, F_MAX]. Positive outside, negative inside, +F_MAX when empty.
pub fn sdf_eval(snapshot: &EnvironmentSnapshot, point: [f64; 2], inflation: f64) -> f64 {
    debug_assert!(inflation >= 0.0);
    let mut best = F_MAX;
    for obs in &snapshot.obstacles {
        let dx = point[0] - obs.center[0];
        let dy = point[1] - obs.center[1];
        let d = (dx * dx + dy * dy).sqrt() - obs.radius - inflation;
        if d < best {
            best = d;
        }
    }
    best.clamp(-F_MAX, F_MAX)
}

/// Gradient of `sdf_eval` with respect to the query point: the unit vector
/// away from the nearest inflated obstacle. Zero in clamped regions, at
/// obstacle centers, and for empty snapshots.
pub fn sdf_gradient(snapshot: &EnvironmentSnapshot, point: [f64; 2], inflation: f64) -> [f64; 2] {
    let mut best = f64::INFINITY;
    let mut grad = [0.0, 0.0];
    for obs in &snapshot.obstacles {
        let dx = point[0] - obs.center[0];
        let dy = point[1] - obs.center[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let d = dist - obs.radius - inflation;
        if d < best {
            best = d;
            grad = if dist > 1e-12 { [dx / dist, dy / dist] } else { [0.0, 0.0] };
        }
    }
    if !(-F_MAX..F_MAX).contains(&best) {
        // Clamped (or empty): the SDF is constant there.
        return [0.0, 0.0];
    }
    grad
}

/// Advance every obstacle by its constant velocity. `dt` may not be negative.
pub fn predict(snapshot: &EnvironmentSnapshot, dt: f64) -> EnvironmentSnapshot {
    debug_assert!(dt >= 0.0);
    shift(snapshot, dt)
}

/// Constant-velocity shift by a signed time offset. Used internally both for
/// forward prediction and for reconstructing the past SDF channel.
pub(crate) fn shift(snapshot: &EnvironmentSnapshot, dt: f64) -> EnvironmentSnapshot {
    let obstacles = snapshot
        .obstacles
        .iter()
        .map(|o| Obstacle {
            center: [o.center[0] + o.velocity[0] * dt, o.center[1] + o.velocity[1] * dt],
            radius: o.radius,
            velocity: o.velocity,
        })
        .collect();
    EnvironmentSnapshot {
        obstacles,
        window_center: snapshot.window_center,
        window_size: snapshot.window_size,
        timestamp: snapshot.timestamp + dt,
    }
}

/// Raster resolution over the sensing window. Cells sample at their centers;
/// the origin is the lower-left corner of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize) -> Result<Self, GeometryError> {
        if nx == 0 || ny == 0 {
            return Err(GeometryError::InvalidGrid { nx, ny });
        }
        Ok(Self { nx, ny })
    }

    pub fn square(n: usize) -> Result<Self, GeometryError> {
        Self::new(n, n)
    }
}

/// Rasterized failure function over the sensing window.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    /// Row-major values, index = ix * ny + iy.
    pub values: Vec<f64>,
    pub nx: usize,
    pub ny: usize,
    /// Lower-left corner of the window, world coordinates.
    pub origin: [f64; 2],
    /// Cell size, meters (window_size / nx).
    pub spacing: f64,
    pub timestamp: f64,
}

impl SdfGrid {
    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.ny + iy]
    }

    /// World coordinate of the center of cell (ix, iy).
    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.spacing,
            self.origin[1] + (iy as f64 + 0.5) * self.spacing,
        ]
    }
}

/// Evaluate the SDF at every cell center of the window raster.
pub fn rasterize(snapshot: &EnvironmentSnapshot, spec: GridSpec, inflation: f64) -> SdfGrid {
    let origin = snapshot.origin();
    let spacing = snapshot.window_size / spec.nx as f64;
    let mut values = vec![0.0; spec.nx * spec.ny];
    for ix in 0..spec.nx {
        let x = origin[0] + (ix as f64 + 0.5) * spacing;
        for iy in 0..spec.ny {
            let y = origin[1] + (iy as f64 + 0.5) * spacing;
            values[ix * spec.ny + iy] = sdf_eval(snapshot, [x, y], inflation);
        }
    }
    SdfGrid { values, nx: spec.nx, ny: spec.ny, origin, spacing, timestamp: snapshot.timestamp }
}

/// Rasterize the snapshot at `steps` successive prediction times t, t+dt, ...
pub fn sdf_sequence(
    snapshot: &EnvironmentSnapshot,
    spec: GridSpec,
    inflation: f64,
    steps: usize,
    dt: f64,
) -> Vec<SdfGrid> {
    debug_assert!(steps >= 1);
    (0..steps).map(|i| rasterize(&predict(snapshot, i as f64 * dt), spec, inflation)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snap(obstacles: Vec<Obstacle>) -> EnvironmentSnapshot {
        EnvironmentSnapshot::new(obstacles, [0.0, 0.0], 8.0)
    }

    #[test]
    fn sdf_single_obstacle() {
        let s = snap(vec![Obstacle::new([0.0, 0.0], 0.5, [0.0, 0.0])]);
        assert_eq!(sdf_eval(&s, [1.0, 0.0], 0.0), 0.5);
    }

    #[test]
    fn sdf_empty_is_fmax() {
        let s = snap(vec![]);
        assert_eq!(sdf_eval(&s, [3.0, -2.0], 0.0), F_MAX);
        assert_eq!(sdf_eval(&s, [0.0, 0.0], 0.3), F_MAX);
    }

    #[test]
    fn sdf_two_obstacles_symmetric_min() {
        let s = snap(vec![
            Obstacle::new([0.0, 0.0], 0.5, [0.0, 0.0]),
            Obstacle::new([2.0, 0.0], 0.5, [0.0, 0.0]),
        ]);
        assert_eq!(sdf_eval(&s, [1.0, 0.0], 0.0), 0.5);
    }

    #[test]
    fn sdf_inside_inflated_disk() {
        let s = snap(vec![Obstacle::new([0.0, 0.0], 0.5, [0.0, 0.0])]);
        let v = sdf_eval(&s, [0.6, 0.0], 0.3);
        assert!((v - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn predict_linear_motion() {
        let s = snap(vec![Obstacle::new([0.0, 0.0], 0.3, [1.0, 0.0])]);
        let p = predict(&s, 0.4);
        assert_eq!(p.obstacles[0].center, [0.4, 0.0]);
        assert_eq!(p.obstacles[0].velocity, [1.0, 0.0]);
        assert_eq!(p.timestamp, 0.4);
    }

    #[test]
    fn predict_zero_dt_is_identity() {
        let s = snap(vec![Obstacle::new([1.0, 2.0], 0.3, [0.5, -0.2])]);
        assert_eq!(predict(&s, 0.0), s);
    }

    #[test]
    fn predict_static_obstacle() {
        let s = snap(vec![Obstacle::new([1.0, 2.0], 0.3, [0.0, 0.0])]);
        assert_eq!(predict(&s, 7.3).obstacles[0].center, [1.0, 2.0]);
    }

    #[test]
    fn rasterize_empty_all_fmax() {
        let g = rasterize(&snap(vec![]), GridSpec::square(10).unwrap(), 0.3);
        assert!(g.values.iter().all(|&v| v == F_MAX));
    }

    #[test]
    fn rasterize_matches_direct_eval_at_cell_centers() {
        let s = snap(vec![Obstacle::new([0.0, 0.0], 0.5, [0.0, 0.0])]);
        let g = rasterize(&s, GridSpec::square(100).unwrap(), 0.0);
        // Cell containing the obstacle center.
        let ix = 50;
        let iy = 50;
        let c = g.cell_center(ix, iy);
        assert_eq!(g.get(ix, iy), sdf_eval(&s, c, 0.0));
        assert!((g.get(ix, iy) - (-0.5)).abs() <= g.spacing);
        // Exact equality everywhere, no interpolation error at sample points.
        for ix in 0..g.nx {
            for iy in 0..g.ny {
                assert_eq!(g.get(ix, iy), sdf_eval(&s, g.cell_center(ix, iy), 0.0));
            }
        }
    }

    #[test]
    fn rasterize_of_zero_prediction_is_identity() {
        let s = snap(vec![Obstacle::new([1.0, 1.0], 0.4, [0.3, 0.1])]);
        let spec = GridSpec::square(32).unwrap();
        assert_eq!(rasterize(&predict(&s, 0.0), spec, 0.3), rasterize(&s, spec, 0.3));
    }

    #[test]
    fn sequence_static_obstacles_identical() {
        let s = snap(vec![Obstacle::new([1.0, -1.0], 0.3, [0.0, 0.0])]);
        let seq = sdf_sequence(&s, GridSpec::square(20).unwrap(), 0.3, 3, 0.1);
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[0].values, seq[1].values);
        assert_eq!(seq[1].values, seq[2].values);
    }

    #[test]
    fn sequence_single_step() {
        let s = snap(vec![Obstacle::new([1.0, -1.0], 0.3, [0.2, 0.0])]);
        let spec = GridSpec::square(16).unwrap();
        let seq = sdf_sequence(&s, spec, 0.3, 1, 0.1);
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0], rasterize(&s, spec, 0.3));
    }

    #[test]
    fn sequence_zero_level_translates_with_motion() {
        // Obstacle moving +x at 1 m/s: the zero crossing along the x axis in
        // front of the obstacle shifts by dt between consecutive grids.
        let s = snap(vec![Obstacle::new([0.0, 0.0], 0.5, [1.0, 0.0])]);
        let spec = GridSpec::square(200).unwrap();
        let dt = 0.1;
        let seq = sdf_sequence(&s, spec, 0.0, 2, dt);
        let iy = 100; // row of cells nearest y = 0.025
        let zero_crossing = |g: &SdfGrid| -> f64 {
            // Sub-cell linear interpolation of the crossing on the +x side.
            for ix in g.nx / 2..g.nx - 1 {
                let a = g.get(ix, iy);
                let b = g.get(ix + 1, iy);
                if a <= 0.0 && b > 0.0 {
                    let frac = -a / (b - a);
                    return g.cell_center(ix, iy)[0] + frac * g.spacing;
                }
            }
            panic!("no zero crossing found");
        };
        let shift = zero_crossing(&seq[1]) - zero_crossing(&seq[0]);
        assert!((shift - dt).abs() < 1e-6, "shift = {shift}");
    }

    #[test]
    fn lipschitz_in_query_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = snap(vec![
            Obstacle::new([1.0, 0.5], 0.4, [0.0, 0.0]),
            Obstacle::new([-2.0, 1.5], 0.7, [0.0, 0.0]),
            Obstacle::new([0.0, -3.0], 0.2, [0.0, 0.0]),
        ]);
        for _ in 0..2000 {
            let p: [f64; 2] = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let q: [f64; 2] = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            let df = (sdf_eval(&s, p, 0.3) - sdf_eval(&s, q, 0.3)).abs();
            assert!(df <= dist + 1e-12);
        }
    }

    #[test]
    fn monotone_in_inflation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = snap(vec![
            Obstacle::new([1.0, 0.5], 0.4, [0.0, 0.0]),
            Obstacle::new([-2.0, 1.5], 0.7, [0.0, 0.0]),
        ]);
        for _ in 0..1000 {
            let p: [f64; 2] = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let a = rng.gen_range(0.0..1.0);
            let b = rng.gen_range(0.0..1.0);
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            assert!(sdf_eval(&s, p, hi) <= sdf_eval(&s, p, lo) + 1e-12);
        }
    }

    #[test]
    fn negative_iff_strictly_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = vec![
            Obstacle::new([1.0, 0.5], 0.4, [0.0, 0.0]),
            Obstacle::new([-1.0, -0.5], 0.6, [0.0, 0.0]),
        ];
        let s = snap(obs.clone());
        let infl = 0.3;
        for _ in 0..2000 {
            let p: [f64; 2] = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let inside = obs.iter().any(|o| {
                let d = ((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt();
                d < o.radius + infl
            });
            assert_eq!(sdf_eval(&s, p, infl) < 0.0, inside);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = snap(vec![
            Obstacle::new([1.0, 0.5], 0.4, [0.0, 0.0]),
            Obstacle::new([-2.0, 1.5], 0.7, [0.0, 0.0]),
        ]);
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..500 {
            let p: [f64; 2] = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            // Skip points near the medial axis where the SDF is not smooth.
            let d0 = ((p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)).sqrt() - 0.7;
            let d1 = ((p[0] + 2.0).powi(2) + (p[1] - 1.5).powi(2)).sqrt() - 1.0;
            if (d0 - d1).abs() < 1e-2 {
                continue;
            }
            let g = sdf_gradient(&s, p, 0.3);
            let fd = [
                (sdf_eval(&s, [p[0] + h, p[1]], 0.3) - sdf_eval(&s, [p[0] - h, p[1]], 0.3))
                    / (2.0 * h),
                (sdf_eval(&s, [p[0], p[1] + h], 0.3) - sdf_eval(&s, [p[0], p[1] - h], 0.3))
                    / (2.0 * h),
            ];
            assert!((g[0] - fd[0]).abs() < 1e-5 && (g[1] - fd[1]).abs() < 1e-5);
            checked += 1;
        }
        assert!(checked > 100);
    }
}

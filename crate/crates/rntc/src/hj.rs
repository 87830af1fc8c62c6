//! Grid solver for the time-varying Hamilton-Jacobi-Bellman variational
//! inequality. Integrates the value function backward in time with a
//! first-order Lax-Friedrichs scheme, clamping against the failure function
//! after every step, and reports the maximal safe set as the zero-superlevel
//! set of the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HjError {
    #[error("dt_pde {dt} violates the CFL bound {limit}")]
    CflViolation { dt: f64, limit: f64 },
}

/// Symmetric unicycle control box: v in [-v_max, v_max], omega likewise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self { v_max: 0.5, omega_max: 0.5 }
    }
}

/// Discretization of the (x, y, theta) state space over the sensing window.
/// x and y sample cell centers of the window raster (non-periodic); theta is
/// periodic with nodes at k * 2pi / ntheta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub nx: usize,
    pub ny: usize,
    pub ntheta: usize,
    /// Lower-left corner of the window, world coordinates.
    pub origin: [f64; 2],
    pub window_size: f64,
}

impl StateGrid {
    pub fn new(nx: usize, ny: usize, ntheta: usize, origin: [f64; 2], window_size: f64) -> Self {
        debug_assert!(nx > 1 && ny > 1 && ntheta > 1);
        Self { nx, ny, ntheta, origin, window_size }
    }

    #[inline]
    pub fn hx(&self) -> f64 {
        self.window_size / self.nx as f64
    }

    #[inline]
    pub fn hy(&self) -> f64 {
        self.window_size / self.ny as f64
    }

    #[inline]
    pub fn htheta(&self) -> f64 {
        TAU / self.ntheta as f64
    }

    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        self.origin[0] + (ix as f64 + 0.5) * self.hx()
    }

    #[inline]
    pub fn y(&self, iy: usize) -> f64 {
        self.origin[1] + (iy as f64 + 0.5) * self.hy()
    }

    #[inline]
    pub fn theta(&self, ik: usize) -> f64 {
        ik as f64 * self.htheta()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, ik: usize) -> usize {
        (ix * self.ny + iy) * self.ntheta + ik
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny * self.ntheta
    }

    /// Largest stable explicit Euler step for the global LF scheme.
    pub fn cfl_limit(&self, bounds: ControlBounds) -> f64 {
        1.0 / (bounds.v_max / self.hx() + bounds.v_max / self.hy()
            + bounds.omega_max / self.htheta())
    }
}

/// Value function samples over a `StateGrid` at one time label.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: StateGrid,
    /// theta-fastest layout, index = (ix * ny + iy) * ntheta + ik.
    pub values: Vec<f64>,
    pub time_label: f64,
}

impl ValueGrid {
    /// Broadcast a 2-D failure raster (length nx * ny) over the theta axis.
    pub fn from_failure(grid: StateGrid, failure: &[f64], time_label: f64) -> Self {
        debug_assert_eq!(failure.len(), grid.nx * grid.ny);
        let mut values = vec![0.0; grid.n_nodes()];
        for (cell, &f) in failure.iter().enumerate() {
            let base = cell * grid.ntheta;
            values[base..base + grid.ntheta].fill(f);
        }
        Self { grid, values, time_label }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Fraction of grid nodes classified safe (value >= 0).
    pub fn safe_fraction(&self) -> f64 {
        let n = self.values.iter().filter(|&&v| v >= 0.0).count();
        n as f64 / self.values.len() as f64
    }
}

/// Closed-form maximum of grad . f(x, u) over the control box for the
/// unicycle: v_max |g_x cos(theta) + g_y sin(theta)| + omega_max |g_theta|.
#[inline]
pub fn hamiltonian(theta: f64, grad: [f64; 3], bounds: ControlBounds) -> f64 {
    bounds.v_max * (grad[0] * theta.cos() + grad[1] * theta.sin()).abs()
        + bounds.omega_max * grad[2].abs()
}

/// One explicit backward Euler step of the HJB-VI.
///
/// Computes `V~ = V_next + dt * H_LF(x, DV_next)` with the Lax-Friedrichs
/// numerical Hamiltonian (central-average gradient plus dissipation with
/// coefficients alpha = (v_max, v_max, omega_max)) and returns the pointwise
/// minimum with the failure raster `f_now` evaluated at the step's time.
/// One-sided differences are used at the non-periodic x/y boundaries; the
/// theta axis wraps.
pub fn backward_step(
    v_next: &ValueGrid,
    f_now: &[f64],
    dt_pde: f64,
    bounds: ControlBounds,
) -> Result<ValueGrid, HjError> {
    let limit = v_next.grid.cfl_limit(bounds);
    if dt_pde > limit {
        return Err(HjError::CflViolation { dt: dt_pde, limit });
    }
    let mut out = vec![0.0; v_next.values.len()];
    backward_step_into(v_next, f_now, dt_pde, bounds, &mut out);
    Ok(ValueGrid { grid: v_next.grid, values: out, time_label: v_next.time_label - dt_pde })
}

fn backward_step_into(
    v_next: &ValueGrid,
    f_now: &[f64],
    dt: f64,
    bounds: ControlBounds,
    out: &mut [f64],
) {
    let g = v_next.grid;
    let (nx, ny, nk) = (g.nx, g.ny, g.ntheta);
    debug_assert_eq!(f_now.len(), nx * ny);
    let (hx, hy, hk) = (g.hx(), g.hy(), g.htheta());
    let v = &v_next.values;
    let (ax, ay, ak) = (bounds.v_max, bounds.v_max, bounds.omega_max);
    let trig: Vec<(f64, f64)> = (0..nk).map(|ik| (g.theta(ik).cos(), g.theta(ik).sin())).collect();
    let slab = ny * nk;

    out.par_chunks_mut(slab).enumerate().for_each(|(ix, slab_out)| {
        for iy in 0..ny {
            let f_val = f_now[ix * ny + iy];
            for ik in 0..nk {
                let idx = (ix * ny + iy) * nk + ik;
                // Upwind pair (backward, forward) per axis. The x/y window
                // edges use one-sided differences (linear-extrapolation
                // ghost cells), the standard non-reflecting outflow closure;
                // the dissipation term vanishes there.
                let (pxm, pxp) = if ix == 0 {
                    let d = (v[idx + slab] - v[idx]) / hx;
                    (d, d)
                } else if ix == nx - 1 {
                    let d = (v[idx] - v[idx - slab]) / hx;
                    (d, d)
                } else {
                    ((v[idx] - v[idx - slab]) / hx, (v[idx + slab] - v[idx]) / hx)
                };
                let (pym, pyp) = if iy == 0 {
                    let d = (v[idx + nk] - v[idx]) / hy;
                    (d, d)
                } else if iy == ny - 1 {
                    let d = (v[idx] - v[idx - nk]) / hy;
                    (d, d)
                } else {
                    ((v[idx] - v[idx - nk]) / hy, (v[idx + nk] - v[idx]) / hy)
                };
                let km = if ik == 0 { idx + nk - 1 } else { idx - 1 };
                let kp = if ik == nk - 1 { idx + 1 - nk } else { idx + 1 };
                let pkm = (v[idx] - v[km]) / hk;
                let pkp = (v[kp] - v[idx]) / hk;

                let (ct, st) = trig[ik];
                let h = bounds.v_max * (0.5 * (pxm + pxp) * ct + 0.5 * (pym + pyp) * st).abs()
                    + bounds.omega_max * (0.5 * (pkm + pkp)).abs();
                // Backward-time dissipation: smoothing requires the +
                // sign here (the scheme is monotone under the CFL bound).
                let diss =
                    0.5 * (ax * (pxp - pxm) + ay * (pyp - pym) + ak * (pkp - pkm));
                let cand = v[idx] + dt * (h + diss);
                slab_out[iy * nk + ik] = if f_val < cand { f_val } else { cand };
            }
        }
    });
}

/// Cells skipped at each non-periodic grid edge when judging convergence.
pub const BOUNDARY_MARGIN: usize = 2;

/// Outcome of a backward reachability solve.
#[derive(Debug, Clone)]
pub struct BrtSolution {
    /// Value function at t = 0.
    pub value: ValueGrid,
    pub converged: bool,
    /// Max-norm difference between the full-horizon and half-horizon answers
    /// at t = 0; the convergence certificate.
    pub horizon_gap: f64,
    pub steps: usize,
}

/// Solver knobs. `cfl_safety` scales the CFL limit; `tol` bounds the change
/// of the t = 0 answer when the horizon is doubled from horizon/2, measured
/// over interior nodes whose value lies within `band` of the zero level.
/// Far-field values are guaranteed-clearance magnitudes that keep refining
/// while any obstacle is still crossing the window; the safe-set structure
/// the pipeline consumes is the banded part.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HjParams {
    pub bounds: ControlBounds,
    pub horizon: f64,
    pub cfl_safety: f64,
    pub tol: f64,
    pub band: f64,
    /// Skip the half-horizon reference solve (1.5x cheaper, no certificate).
    pub check_convergence: bool,
}

impl Default for HjParams {
    fn default() -> Self {
        // A 12 s horizon lets obstacles at typical generated speeds cross
        // the 8 m window, so the zero-level structure has settled.
        Self {
            bounds: ControlBounds::default(),
            horizon: 12.0,
            cfl_safety: 0.5,
            tol: 0.05,
            band: 1.0,
            check_convergence: true,
        }
    }
}

/// Integrate the HJB-VI backward from t = horizon to t = 0.
///
/// `failure` must produce the 2-D failure raster (length nx * ny, cell-center
/// samples) for any time in [0, horizon]. Convergence is certified by
/// comparing against a half-horizon solve: the value at t = 0 is pointwise
/// non-increasing in the horizon, so a small gap means a longer horizon
/// would change the answer by no more than the observed decrement.
pub fn solve_brt<F>(failure: F, grid: StateGrid, params: &HjParams) -> BrtSolution
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    let full = integrate(&failure, grid, params.horizon, params);
    if !params.check_convergence {
        return BrtSolution { value: full.0, converged: true, horizon_gap: 0.0, steps: full.1 };
    }
    let half = integrate(&failure, grid, 0.5 * params.horizon, params);
    // Interior nodes only: the one-sided boundary closure has its own slow
    // transient that would mask genuine convergence of the answer.
    let m = BOUNDARY_MARGIN.min(grid.nx / 4).min(grid.ny / 4);
    let mut gap = 0.0f64;
    for ix in m..grid.nx - m {
        for iy in m..grid.ny - m {
            let base = (ix * grid.ny + iy) * grid.ntheta;
            for ik in 0..grid.ntheta {
                let (a, b) = (full.0.values[base + ik], half.0.values[base + ik]);
                if a.abs().min(b.abs()) <= params.band {
                    gap = gap.max((a - b).abs());
                }
            }
        }
    }
    BrtSolution {
        value: full.0,
        converged: gap <= params.tol,
        horizon_gap: gap,
        steps: full.1 + half.1,
    }
}

fn integrate<F>(failure: &F, grid: StateGrid, horizon: f64, params: &HjParams) -> (ValueGrid, usize)
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    debug_assert!(horizon > 0.0);
    let dt_max = params.cfl_safety * grid.cfl_limit(params.bounds);
    let steps = (horizon / dt_max).ceil() as usize;
    let dt = horizon / steps as f64;
    let mut v = ValueGrid::from_failure(grid, &failure(horizon), horizon);
    let mut buf = vec![0.0; v.values.len()];
    for s in 0..steps {
        let t = horizon - (s + 1) as f64 * dt;
        let f_now = failure(t.max(0.0));
        backward_step_into(&v, &f_now, dt, params.bounds, &mut buf);
        std::mem::swap(&mut v.values, &mut buf);
        v.time_label = t;
    }
    (v, steps)
}

/// Trilinear interpolation with periodic wrap-around in theta. Queries with
/// (x, y) outside the node hull are clamped to the boundary value and
/// flagged via the second return.
pub fn interpolate(v: &ValueGrid, state: [f64; 3]) -> (f64, bool) {
    let g = v.grid;
    let fx = (state[0] - g.origin[0]) / g.hx() - 0.5;
    let fy = (state[1] - g.origin[1]) / g.hy() - 0.5;
    let clamped = fx < -1e-9
        || fx > (g.nx - 1) as f64 + 1e-9
        || fy < -1e-9
        || fy > (g.ny - 1) as f64 + 1e-9;
    let fx = fx.clamp(0.0, (g.nx - 1) as f64);
    let fy = fy.clamp(0.0, (g.ny - 1) as f64);
    let ft = (state[2].rem_euclid(TAU)) / g.htheta();

    let ix = (fx.floor() as usize).min(g.nx.saturating_sub(2));
    let iy = (fy.floor() as usize).min(g.ny.saturating_sub(2));
    let ik = (ft.floor() as usize).min(g.ntheta - 1);
    let (wx, wy) = (fx - ix as f64, fy - iy as f64);
    let wk = ft - ik as f64;
    let ikp = (ik + 1) % g.ntheta;
    let ixp = (ix + 1).min(g.nx - 1);
    let iyp = (iy + 1).min(g.ny - 1);

    let c = |ax: usize, ay: usize, ak: usize| v.values[g.index(ax, ay, ak)];
    let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
    let v00 = lerp(c(ix, iy, ik), c(ix, iy, ikp), wk);
    let v01 = lerp(c(ix, iyp, ik), c(ix, iyp, ikp), wk);
    let v10 = lerp(c(ixp, iy, ik), c(ixp, iy, ikp), wk);
    let v11 = lerp(c(ixp, iyp, ik), c(ixp, iyp, ikp), wk);
    (lerp(lerp(v00, v01, wy), lerp(v10, v11, wy), wx), clamped)
}

//! The small MLP evaluated inside the optimizer. Its parameters are not
//! trained directly: they arrive as a flat vector emitted by the
//! hypernetwork, so the backward pass here produces gradients with respect
//! to that vector, not weight updates.

use super::TrainMode;
use crate::config::Scale;
use thiserror::Error;

const SELU_ALPHA: f64 = 1.6732632423543772;
const SELU_SCALE: f64 = 1.0507009873554805;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("parameter vector length {got} does not match the architecture ({want})")]
    ParamLength { got: usize, want: usize },
    #[error("input length {got} does not match the architecture ({want})")]
    InputShape { got: usize, want: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Output head: the non-negative residual (`ELU(x) + 1`) or a raw value
/// estimate (identity), the ablation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    EluPlusOne,
    Identity,
}

impl From<TrainMode> for OutputActivation {
    fn from(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Rntc => OutputActivation::EluPlusOne,
            TrainMode::Ntc => OutputActivation::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Sin,
    Selu,
}

impl Act {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Act::Sin => z.sin(),
            Act::Selu => {
                if z > 0.0 {
                    SELU_SCALE * z
                } else {
                    SELU_SCALE * SELU_ALPHA * (z.exp() - 1.0)
                }
            }
        }
    }

    #[inline]
    fn deriv(self, z: f64) -> f64 {
        match self {
            Act::Sin => z.cos(),
            // z = 0 takes the positive branch for determinism.
            Act::Selu => {
                if z > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp()
                }
            }
        }
    }
}

#[inline]
fn out_act(mode: OutputActivation, z: f64) -> f64 {
    match mode {
        // ELU(z) + 1 = e^z for z <= 0: strictly positive for every finite z.
        // exp underflows to +0 near z = -746, so clamp to the smallest
        // normal float to keep the positivity range exact in f64 as well.
        OutputActivation::EluPlusOne => {
            if z > 0.0 {
                z + 1.0
            } else {
                z.exp().max(f64::MIN_POSITIVE)
            }
        }
        OutputActivation::Identity => z,
    }
}

#[inline]
fn out_act_deriv(mode: OutputActivation, z: f64) -> f64 {
    match mode {
        // Both branches give 1 at z = 0; the z > 0 branch is used there.
        OutputActivation::EluPlusOne => {
            if z > 0.0 {
                1.0
            } else {
                z.exp()
            }
        }
        OutputActivation::Identity => 1.0,
    }
}

/// Layer widths including the 3-entry input and scalar output. The first
/// three hidden layers use Sin, the remaining hidden layers SELU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MainNetSpec {
    pub widths: Vec<usize>,
}

impl MainNetSpec {
    pub fn for_scale(scale: Scale) -> Self {
        let widths = match scale {
            Scale::Paper => vec![3, 36, 36, 36, 18, 18, 18, 9, 9, 9, 1],
            Scale::Desk => vec![3, 18, 18, 18, 9, 9, 9, 5, 5, 5, 1],
        };
        Self { widths }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn act(&self, layer: usize) -> Act {
        if layer < 3 {
            Act::Sin
        } else {
            Act::Selu
        }
    }

    /// Offset of layer `l`'s weight block inside the flat parameter vector;
    /// biases follow the weights of each layer.
    fn layer_offset(&self, layer: usize) -> usize {
        self.widths.windows(2).take(layer).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

/// Flat parameter vector with a validated length.
#[derive(Debug, Clone, PartialEq)]
pub struct MainNetParams {
    theta: Vec<f64>,
}

impl MainNetParams {
    pub fn new(spec: &MainNetSpec, theta: Vec<f64>) -> Result<Self, NeuralError> {
        if theta.len() != spec.param_count() {
            return Err(NeuralError::ParamLength { got: theta.len(), want: spec.param_count() });
        }
        Ok(Self { theta })
    }

    pub fn zeros(spec: &MainNetSpec) -> Self {
        Self { theta: vec![0.0; spec.param_count()] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// y[n x out] = x[n x in] . W^T + b, with W row-major (out x in).
fn linear_batch(x: &[f64], n: usize, w: &[f64], b: &[f64], in_dim: usize, out_dim: usize, y: &mut [f64]) {
    debug_assert_eq!(x.len(), n * in_dim);
    debug_assert_eq!(y.len(), n * out_dim);
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for k in 0..in_dim {
                acc += xr[k] * wo[k];
            }
            yr[o] = acc;
        }
    }
}

/// Pre- and post-activation values for each layer of a batched forward pass.
pub struct ForwardCache {
    n: usize,
    /// z[l]: pre-activations of layer l, n x widths[l+1].
    z: Vec<Vec<f64>>,
    /// a[l]: post-activations of hidden layer l (output layer excluded).
    a: Vec<Vec<f64>>,
}

/// Evaluate the network on `n` normalized states (flat n x 3).
pub fn forward_batch(
    spec: &MainNetSpec,
    params: &MainNetParams,
    states: &[f64],
    mode: OutputActivation,
    values: &mut Vec<f64>,
) {
    let (out, _) = forward_impl(spec, &params.theta, states, mode, false);
    *values = out;
}

pub fn forward_batch_cached(
    spec: &MainNetSpec,
    params: &MainNetParams,
    states: &[f64],
    mode: OutputActivation,
) -> (Vec<f64>, ForwardCache) {
    let (out, cache) = forward_impl(spec, &params.theta, states, mode, true);
    (out, cache.expect("cache requested"))
}

fn forward_impl(
    spec: &MainNetSpec,
    theta: &[f64],
    states: &[f64],
    mode: OutputActivation,
    keep_cache: bool,
) -> (Vec<f64>, Option<ForwardCache>) {
    let n_layers = spec.n_layers();
    assert_eq!(states.len() % spec.widths[0], 0, "states must be flat n x 3");
    let n = states.len() / spec.widths[0];
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(if keep_cache { n_layers } else { 0 });
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(if keep_cache { n_layers - 1 } else { 0 });
    let mut cur: Vec<f64> = states.to_vec();
    for l in 0..n_layers {
        let (in_dim, out_dim) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let (w, b) = (&theta[off..off + out_dim * in_dim], &theta[off + out_dim * in_dim..off + out_dim * in_dim + out_dim]);
        let mut z = vec![0.0; n * out_dim];
        linear_batch(&cur, n, w, b, in_dim, out_dim, &mut z);
        let next = if l + 1 == n_layers {
            // Output layer.
            let v: Vec<f64> = z.iter().map(|&zz| out_act(mode, zz)).collect();
            if keep_cache {
                zs.push(z);
            }
            return (
                v,
                if keep_cache { Some(ForwardCache { n, z: zs, a: activations }) } else { None },
            );
        } else {
            let act = spec.act(l);
            let a: Vec<f64> = z.iter().map(|&zz| act.eval(zz)).collect();
            if keep_cache {
                zs.push(z);
                activations.push(a.clone());
            }
            a
        };
        cur = next;
    }
    unreachable!("n_layers >= 1");
}

/// Accumulate d(loss)/d(theta) into `dtheta` given d(loss)/d(output) per
/// state. `states` must be the same flat batch passed to the forward pass.
pub fn backward_theta(
    spec: &MainNetSpec,
    params: &MainNetParams,
    states: &[f64],
    cache: &ForwardCache,
    dvalues: &[f64],
    mode: OutputActivation,
    dtheta: &mut [f64],
) {
    let n = cache.n;
    debug_assert_eq!(dvalues.len(), n);
    debug_assert_eq!(dtheta.len(), spec.param_count());
    let n_layers = spec.n_layers();
    let theta = &params.theta;

    // Delta of the output layer.
    let z_out = &cache.z[n_layers - 1];
    let mut delta: Vec<f64> = (0..n).map(|r| dvalues[r] * out_act_deriv(mode, z_out[r])).collect();

    for l in (0..n_layers).rev() {
        let (in_dim, out_dim) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let prev: &[f64] = if l == 0 { states } else { &cache.a[l - 1] };
        {
            let (dw, db) = dtheta[off..off + out_dim * in_dim + out_dim].split_at_mut(out_dim * in_dim);
            for r in 0..n {
                let pr = &prev[r * in_dim..(r + 1) * in_dim];
                let dr = &delta[r * out_dim..(r + 1) * out_dim];
                for o in 0..out_dim {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for k in 0..in_dim {
                        wrow[k] += d * pr[k];
                    }
                    db[o] += d;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate: delta_prev = (delta . W) * act'(z_prev).
        let w = &theta[off..off + out_dim * in_dim];
        let z_prev = &cache.z[l - 1];
        let act = spec.act(l - 1);
        let mut next = vec![0.0; n * in_dim];
        for r in 0..n {
            let dr = &delta[r * out_dim..(r + 1) * out_dim];
            let nr = &mut next[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let d = dr[o];
                if d == 0.0 {
                    continue;
                }
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                for k in 0..in_dim {
                    nr[k] += d * wrow[k];
                }
            }
            let zr = &z_prev[r * in_dim..(r + 1) * in_dim];
            for k in 0..in_dim {
                nr[k] *= act.deriv(zr[k]);
            }
        }
        delta = next;
    }
}

/// Single-state forward pass.
pub fn forward_one(
    spec: &MainNetSpec,
    params: &MainNetParams,
    state: [f64; 3],
    mode: OutputActivation,
) -> f64 {
    let (v, _) = forward_impl(spec, &params.theta, &state, mode, false);
    v[0]
}

/// Value and exact reverse-mode gradient with respect to the (normalized)
/// input state. Used by the MPC for terminal-constraint Jacobians.
pub fn value_and_input_grad(
    spec: &MainNetSpec,
    params: &MainNetParams,
    state: [f64; 3],
    mode: OutputActivation,
) -> (f64, [f64; 3]) {
    let n_layers = spec.n_layers();
    let theta = &params.theta;
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut cur = state.to_vec();
    for l in 0..n_layers {
        let (in_dim, out_dim) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let w = &theta[off..off + out_dim * in_dim];
        let b = &theta[off + out_dim * in_dim..off + out_dim * in_dim + out_dim];
        let mut z = vec![0.0; out_dim];
        for o in 0..out_dim {
            let mut acc = b[o];
            for k in 0..in_dim {
                acc += cur[k] * w[o * in_dim + k];
            }
            z[o] = acc;
        }
        if l + 1 < n_layers {
            let act = spec.act(l);
            cur = z.iter().map(|&zz| act.eval(zz)).collect();
            activations.push(cur.clone());
        } else {
            cur = z.clone();
        }
        zs.push(z);
    }
    let value = out_act(mode, zs[n_layers - 1][0]);
    let mut delta = vec![out_act_deriv(mode, zs[n_layers - 1][0])];
    for l in (0..n_layers).rev() {
        let (in_dim, out_dim) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let w = &theta[off..off + out_dim * in_dim];
        let mut next = vec![0.0; in_dim];
        for o in 0..out_dim {
            for k in 0..in_dim {
                next[k] += delta[o] * w[o * in_dim + k];
            }
        }
        if l > 0 {
            let act = spec.act(l - 1);
            for k in 0..in_dim {
                next[k] *= act.deriv(zs[l - 1][k]);
            }
        }
        delta = next;
    }
    (value, [delta[0], delta[1], delta[2]])
}

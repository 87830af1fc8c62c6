//! Convolutional hypernetwork: maps the normalized two-channel SDF raster to
//! the flat parameter vector of the main network.

use super::mainnet::MainNetSpec;
use crate::config::Scale;
use crate::geometry::F_MAX;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One valid-padding convolution stage, optionally followed by 2x2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pool: bool,
}

/// Backbone plus linear head. All convolutions use stride 1 and valid
/// padding with ReLU; pooling is 2x2 stride 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperNetSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub head_out: usize,
}

impl HyperNetSpec {
    pub fn for_scale(scale: Scale) -> Self {
        let head_out = MainNetSpec::for_scale(scale).param_count();
        match scale {
            Scale::Paper => Self {
                input_size: 100,
                in_channels: 2,
                convs: vec![
                    ConvSpec { in_ch: 2, out_ch: 16, kernel: 5, pool: true },
                    ConvSpec { in_ch: 16, out_ch: 32, kernel: 5, pool: true },
                    ConvSpec { in_ch: 32, out_ch: 64, kernel: 3, pool: true },
                    ConvSpec { in_ch: 64, out_ch: 128, kernel: 3, pool: true },
                ],
                head_out,
            },
            Scale::Desk => Self {
                input_size: 32,
                in_channels: 2,
                convs: vec![
                    ConvSpec { in_ch: 2, out_ch: 8, kernel: 5, pool: true },
                    ConvSpec { in_ch: 8, out_ch: 16, kernel: 5, pool: true },
                    ConvSpec { in_ch: 16, out_ch: 32, kernel: 3, pool: false },
                    ConvSpec { in_ch: 32, out_ch: 32, kernel: 3, pool: false },
                ],
                head_out,
            },
        }
    }

    /// Spatial side after each conv (and its pool, when present).
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut s = self.input_size;
        let mut trace = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            assert!(s >= c.kernel, "feature map {s} smaller than kernel {}", c.kernel);
            s = s - c.kernel + 1;
            if c.pool {
                s /= 2;
            }
            trace.push(s);
        }
        trace
    }

    pub fn head_in(&self) -> usize {
        let s = *self.spatial_trace().last().unwrap();
        self.convs.last().unwrap().out_ch * s * s
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self
            .convs
            .iter()
            .map(|c| c.out_ch * c.in_ch * c.kernel * c.kernel + c.out_ch)
            .sum();
        convs + self.head_out * self.head_in() + self.head_out
    }

    fn conv_offset(&self, layer: usize) -> usize {
        self.convs[..layer]
            .iter()
            .map(|c| c.out_ch * c.in_ch * c.kernel * c.kernel + c.out_ch)
            .sum()
    }

    fn head_offset(&self) -> usize {
        self.conv_offset(self.convs.len())
    }
}

/// Divide raw SDF samples (meters) by the clamp bound so the network sees
/// values in [-1, 1].
pub fn normalize_input(raw: &[f32]) -> Vec<f64> {
    raw.iter().map(|&v| v as f64 / F_MAX).collect()
}

/// Hypernetwork with a flat weight vector (conv weights, conv biases, head
/// weights, head bias, in layer order).
#[derive(Debug, Clone)]
pub struct HyperNet {
    pub spec: HyperNetSpec,
    pub weights: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct HyperCache {
    /// Input to each conv layer (the previous stage output).
    inputs: Vec<Vec<f64>>,
    /// Post-ReLU, pre-pool activations of each conv layer.
    relu: Vec<Vec<f64>>,
    /// Flat argmax indices into `relu` for each pooled output element.
    argmax: Vec<Vec<usize>>,
    /// Flattened features entering the head.
    features: Vec<f64>,
}

impl HyperNet {
    /// Uniform fan-in initialization, reproducible from the seed.
    pub fn init(spec: HyperNetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(spec.param_count());
        for c in &spec.convs {
            let bound = 1.0 / ((c.in_ch * c.kernel * c.kernel) as f64).sqrt();
            let nw = c.out_ch * c.in_ch * c.kernel * c.kernel;
            weights.extend((0..nw).map(|_| rng.gen_range(-bound..bound)));
            weights.extend((0..c.out_ch).map(|_| rng.gen_range(-bound..bound)));
        }
        let bound = 1.0 / (spec.head_in() as f64).sqrt();
        let nw = spec.head_out * spec.head_in();
        weights.extend((0..nw).map(|_| rng.gen_range(-bound..bound)));
        weights.extend((0..spec.head_out).map(|_| rng.gen_range(-bound..bound)));
        Self { spec, weights }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Emit the main-network parameter vector for one normalized input
    /// (flat channels x size x size).
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.run(input, false).0
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, HyperCache) {
        let (theta, cache) = self.run(input, true);
        (theta, cache.expect("cache requested"))
    }

    fn run(&self, input: &[f64], keep: bool) -> (Vec<f64>, Option<HyperCache>) {
        let spec = &self.spec;
        assert_eq!(
            input.len(),
            spec.in_channels * spec.input_size * spec.input_size,
            "input shape mismatch"
        );
        let mut inputs = Vec::new();
        let mut relu_cache = Vec::new();
        let mut argmax_cache = Vec::new();
        let mut cur = input.to_vec();
        let mut size = spec.input_size;
        for (l, c) in spec.convs.iter().enumerate() {
            let out_size = size - c.kernel + 1;
            let off = spec.conv_offset(l);
            let w = &self.weights[off..off + c.out_ch * c.in_ch * c.kernel * c.kernel];
            let b = &self.weights[off + w.len()..off + w.len() + c.out_ch];
            let mut z = vec![0.0; c.out_ch * out_size * out_size];
            conv_forward(&cur, size, c, w, b, &mut z);
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let (next, size_next, argmax) = if c.pool {
                let (p, am) = maxpool2(&z, c.out_ch, out_size);
                (p, out_size / 2, am)
            } else {
                (z.clone(), out_size, Vec::new())
            };
            if keep {
                inputs.push(std::mem::take(&mut cur));
                relu_cache.push(z);
                argmax_cache.push(argmax);
            }
            cur = next;
            size = size_next;
        }
        let features = cur;
        let off = spec.head_offset();
        let head_in = spec.head_in();
        debug_assert_eq!(features.len(), head_in);
        let w = &self.weights[off..off + spec.head_out * head_in];
        let b = &self.weights[off + w.len()..];
        let mut theta = vec![0.0; spec.head_out];
        for o in 0..spec.head_out {
            let row = &w[o * head_in..(o + 1) * head_in];
            let mut acc = b[o];
            for k in 0..head_in {
                acc += row[k] * features[k];
            }
            theta[o] = acc;
        }
        let cache = if keep {
            Some(HyperCache { inputs, relu: relu_cache, argmax: argmax_cache, features })
        } else {
            None
        };
        (theta, cache)
    }

    /// Accumulate d(loss)/d(weights) into `grad` given d(loss)/d(theta).
    pub fn backward(&self, cache: &HyperCache, dtheta: &[f64], grad: &mut [f64]) {
        let spec = &self.spec;
        debug_assert_eq!(dtheta.len(), spec.head_out);
        debug_assert_eq!(grad.len(), self.weights.len());
        let head_in = spec.head_in();
        let off = spec.head_offset();
        let w_head = &self.weights[off..off + spec.head_out * head_in];
        let mut dfeat = vec![0.0; head_in];
        {
            let (dw, db) = grad[off..].split_at_mut(spec.head_out * head_in);
            for o in 0..spec.head_out {
                let d = dtheta[o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                let row = &mut dw[o * head_in..(o + 1) * head_in];
                let wrow = &w_head[o * head_in..(o + 1) * head_in];
                for k in 0..head_in {
                    row[k] += d * cache.features[k];
                    dfeat[k] += d * wrow[k];
                }
            }
        }

        let mut dout = dfeat;
        let mut sizes = vec![spec.input_size];
        for c in &spec.convs {
            let s = sizes.last().unwrap() - c.kernel + 1;
            sizes.push(if c.pool { s / 2 } else { s });
        }
        for (l, c) in spec.convs.iter().enumerate().rev() {
            let in_size = sizes[l];
            let conv_size = in_size - c.kernel + 1;
            // Un-pool: route the pooled gradient to the argmax positions.
            let mut dz = if c.pool {
                let mut dz = vec![0.0; c.out_ch * conv_size * conv_size];
                for (i, &src) in cache.argmax[l].iter().enumerate() {
                    dz[src] += dout[i];
                }
                dz
            } else {
                dout
            };
            // ReLU mask.
            for (dzi, &z) in dz.iter_mut().zip(&cache.relu[l]) {
                if z <= 0.0 {
                    *dzi = 0.0;
                }
            }
            let off = spec.conv_offset(l);
            let nw = c.out_ch * c.in_ch * c.kernel * c.kernel;
            let w = &self.weights[off..off + nw];
            let input = &cache.inputs[l];
            let mut dinput = vec![0.0; input.len()];
            {
                let (dw, db) = grad[off..off + nw + c.out_ch].split_at_mut(nw);
                conv_backward(input, in_size, c, w, &dz, dw, db, &mut dinput);
            }
            dout = dinput;
        }
    }
}

fn conv_forward(input: &[f64], in_size: usize, c: &ConvSpec, w: &[f64], b: &[f64], out: &mut [f64]) {
    let out_size = in_size - c.kernel + 1;
    let in_plane = in_size * in_size;
    let out_plane = out_size * out_size;
    for oc in 0..c.out_ch {
        let out_base = oc * out_plane;
        out[out_base..out_base + out_plane].fill(b[oc]);
        for ic in 0..c.in_ch {
            let in_base = ic * in_plane;
            let w_base = (oc * c.in_ch + ic) * c.kernel * c.kernel;
            for ky in 0..c.kernel {
                for kx in 0..c.kernel {
                    let wv = w[w_base + ky * c.kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..out_size {
                        let irow = in_base + (oy + ky) * in_size + kx;
                        let orow = out_base + oy * out_size;
                        for ox in 0..out_size {
                            out[orow + ox] += wv * input[irow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_size: usize,
    c: &ConvSpec,
    w: &[f64],
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dinput: &mut [f64],
) {
    let out_size = in_size - c.kernel + 1;
    let in_plane = in_size * in_size;
    let out_plane = out_size * out_size;
    for oc in 0..c.out_ch {
        let out_base = oc * out_plane;
        for i in 0..out_plane {
            db[oc] += dz[out_base + i];
        }
        for ic in 0..c.in_ch {
            let in_base = ic * in_plane;
            let w_base = (oc * c.in_ch + ic) * c.kernel * c.kernel;
            for ky in 0..c.kernel {
                for kx in 0..c.kernel {
                    let mut acc = 0.0;
                    let wv = w[w_base + ky * c.kernel + kx];
                    for oy in 0..out_size {
                        let irow = in_base + (oy + ky) * in_size + kx;
                        let orow = out_base + oy * out_size;
                        for ox in 0..out_size {
                            let d = dz[orow + ox];
                            acc += d * input[irow + ox];
                            dinput[irow + ox] += d * wv;
                        }
                    }
                    dw[w_base + ky * c.kernel + kx] += acc;
                }
            }
        }
    }
}

fn maxpool2(z: &[f64], channels: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let half = size / 2;
    let mut out = vec![0.0; channels * half * half];
    let mut argmax = vec![0usize; out.len()];
    for ch in 0..channels {
        let plane = ch * size * size;
        for py in 0..half {
            for px in 0..half {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = plane + (2 * py + dy) * size + 2 * px + dx;
                        if z[idx] > best {
                            best = z[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * half + py) * half + px;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_shape_trace_flattens_to_2048() {
        let spec = HyperNetSpec::for_scale(Scale::Paper);
        assert_eq!(spec.spatial_trace(), vec![48, 22, 10, 4]);
        assert_eq!(spec.head_in(), 2048);
    }

    #[test]
    fn paper_param_count() {
        // Conv stack 106_000 plus 2048 -> 4519 head.
        let spec = HyperNetSpec::for_scale(Scale::Paper);
        assert_eq!(spec.param_count(), 9_365_431);
    }

    #[test]
    fn desk_head_stays_small() {
        let spec = HyperNetSpec::for_scale(Scale::Desk);
        let head = spec.head_out * spec.head_in() + spec.head_out;
        assert!(head <= 100_000, "desk head has {head} parameters");
        assert_eq!(spec.param_count(), 57_871);
    }

    #[test]
    fn forward_is_pure_and_shaped() {
        let spec = HyperNetSpec::for_scale(Scale::Desk);
        let net = HyperNet::init(spec.clone(), 42);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<f64> =
            (0..2 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = net.forward(&input);
        let b = net.forward(&input);
        assert_eq!(a.len(), MainNetSpec::for_scale(Scale::Desk).param_count());
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = HyperNetSpec::for_scale(Scale::Desk);
        let a = HyperNet::init(spec.clone(), 7);
        let b = HyperNet::init(spec, 7);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn channel_order_matters() {
        let spec = HyperNetSpec::for_scale(Scale::Desk);
        let net = HyperNet::init(spec, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch0: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ch1: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ab = ch0.clone();
        ab.extend_from_slice(&ch1);
        let mut ba = ch1;
        ba.extend_from_slice(&ch0);
        assert_ne!(net.forward(&ab), net.forward(&ba));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let spec = HyperNetSpec::for_scale(Scale::Desk);
        let mut net = HyperNet::init(spec.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input: Vec<f64> = (0..2 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Scalar objective: weighted sum of theta entries.
        let coef: Vec<f64> = (0..spec.head_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (theta, cache) = net.forward_cached(&input);
        assert_eq!(theta.len(), spec.head_out);
        let mut grad = vec![0.0; net.weights.len()];
        net.backward(&cache, &coef, &mut grad);
        let h = 1e-6;
        let mut idx_rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let i = idx_rng.gen_range(0..net.weights.len());
            let orig = net.weights[i];
            net.weights[i] = orig + h;
            let up: f64 = net.forward(&input).iter().zip(&coef).map(|(t, c)| t * c).sum();
            net.weights[i] = orig - h;
            let dn: f64 = net.forward(&input).iter().zip(&coef).map(|(t, c)| t * c).sum();
            net.weights[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-7);
            assert!((grad[i] - fd).abs() / denom < 1e-4, "w[{i}]: {} vs {fd}", grad[i]);
        }
    }
}

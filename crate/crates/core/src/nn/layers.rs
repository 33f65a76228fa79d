//! Non-convolutional layers: batch normalization, dropout, activations,
//! fully connected, adaptive max pooling.

use super::{join, visit_ptensor, visit_state, Init, Module, PTensor, ParamSlot, StateSlot};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(B, H, W)`. Training mode uses batch
/// statistics and updates the running estimates; evaluation mode uses the
/// frozen running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: PTensor<Ix1>,
    pub beta: PTensor<Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

pub struct BatchNorm2dCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        // Scale starts near 1 with the same spread as the conv weights.
        let gamma = init.normal((channels,)) + 1.0;
        Self {
            gamma: PTensor::new(gamma),
            beta: PTensor::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BatchNorm2dCache) {
        let (bsz, ch, h, w) = x.dim();
        let count = bsz * h * w;
        let mut y = Array4::zeros(x.raw_dim());
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(ch);
        for c in 0..ch {
            let xc = x.slice(s![.., c, .., ..]);
            let mean = xc.sum() / count as f64;
            let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.v[c], self.beta.v[c]);
            for bi in 0..bsz {
                for r in 0..h {
                    for cc in 0..w {
                        let xh = (x[[bi, c, r, cc]] - mean) * istd;
                        xhat[[bi, c, r, cc]] = xh;
                        y[[bi, c, r, cc]] = g * xh + b;
                    }
                }
            }
            // Unbiased variance for the running estimate, as is conventional.
            let var_running = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var_running;
        }
        (y, BatchNorm2dCache { xhat, inv_std, count })
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, ch, _, _) = x.dim();
        let mut y = x.clone();
        for c in 0..ch {
            let istd = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let (g, b, m) = (self.gamma.v[c], self.beta.v[c], self.running_mean[c]);
            y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| g * (v - m) * istd + b);
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache, dy: &Array4<f64>) -> Array4<f64> {
        let (bsz, ch, h, w) = dy.dim();
        let n = cache.count as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        for c in 0..ch {
            let dyc = dy.slice(s![.., c, .., ..]);
            let xhc = cache.xhat.slice(s![.., c, .., ..]);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = (&dyc * &xhc).sum();
            self.beta.g[c] += sum_dy;
            self.gamma.g[c] += sum_dy_xhat;
            let scale = self.gamma.v[c] * cache.inv_std[c] / n;
            for bi in 0..bsz {
                for r in 0..h {
                    for cc in 0..w {
                        dx[[bi, c, r, cc]] = scale
                            * (n * dy[[bi, c, r, cc]] - sum_dy - cache.xhat[[bi, c, r, cc]] * sum_dy_xhat);
                    }
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        visit_ptensor(join(prefix, "gamma"), &mut self.gamma, f);
        visit_ptensor(join(prefix, "beta"), &mut self.beta, f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        visit_state(join(prefix, "gamma"), &mut self.gamma.v, f);
        visit_state(join(prefix, "beta"), &mut self.beta.v, f);
        visit_state(join(prefix, "running_mean"), &mut self.running_mean, f);
        visit_state(join(prefix, "running_var"), &mut self.running_var, f);
    }
}

/// Inverted dropout: active only in training mode, scales kept activations by
/// `1/(1-p)` so evaluation is a no-op.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

pub struct DropoutCache {
    /// Mask already folded with the keep-scale: entries are 0 or 1/(1-p).
    mask: Array4<f64>,
}

impl Dropout {
    pub fn new(p: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::SeedableRng;
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, DropoutCache) {
        if self.p == 0.0 {
            return (
                x.clone(),
                DropoutCache {
                    mask: Array4::ones(x.raw_dim()),
                },
            );
        }
        let keep = 1.0 - self.p;
        let mask = Array4::from_shape_simple_fn(x.raw_dim(), || {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        (x * &mask, DropoutCache { mask })
    }

    pub fn backward(&self, cache: &DropoutCache, dy: &Array4<f64>) -> Array4<f64> {
        dy * &cache.mask
    }
}

/// LeakyReLU with configurable negative slope; `slope = 0` is plain ReLU.
pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array4<f64>, dy: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected layer, `weight: (out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: PTensor<Ix2>,
    pub b: PTensor<Ix1>,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(inn: usize, out: usize, init: &mut Init) -> Self {
        Self {
            w: PTensor::new(init.normal((out, inn))),
            b: PTensor::new(Array1::zeros(out)),
        }
    }

    /// Fan-in scaled initialization for heads that are not part of the
    /// Gaussian-0.02 scheme.
    pub fn new_xavier(inn: usize, out: usize, init: &mut Init) -> Self {
        let std = (1.0 / inn as f64).sqrt();
        Self {
            w: PTensor::new(init.normal_with_std((out, inn), std)),
            b: PTensor::new(Array1::zeros(out)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (bsz, _) = x.dim();
        let out = self.w.v.dim().0;
        let mut y = Array2::zeros((bsz, out));
        general_mat_mul(1.0, x, &self.w.v.view().reversed_axes(), 0.0, &mut y);
        y += &self.b.v.view().insert_axis(Axis(0));
        y
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        // dW += dY^T X ; db += column sum ; dX = dY W
        general_mat_mul(1.0, &dy.view().reversed_axes(), &cache.x, 1.0, &mut self.w.g);
        self.b.g += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(cache.x.raw_dim());
        general_mat_mul(1.0, dy, &self.w.v, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        visit_ptensor(join(prefix, "weight"), &mut self.w, f);
        visit_ptensor(join(prefix, "bias"), &mut self.b, f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        visit_state(join(prefix, "weight"), &mut self.w.v, f);
        visit_state(join(prefix, "bias"), &mut self.b.v, f);
    }
}

/// Max pooling to a fixed `pool x pool` output; the spatial size must divide
/// evenly. Argmax positions are recorded for the backward scatter.
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_dim: (usize, usize, usize, usize),
}

pub fn adaptive_max_pool(x: &Array4<f64>, pool: usize) -> (Array4<f64>, MaxPoolCache) {
    let (bsz, ch, h, w) = x.dim();
    assert!(
        h % pool == 0 && w % pool == 0,
        "spatial size {h}x{w} must be divisible by pool {pool}"
    );
    let (bh, bw) = (h / pool, w / pool);
    let mut y = Array4::zeros((bsz, ch, pool, pool));
    let mut argmax = vec![0usize; bsz * ch * pool * pool];
    let xs = x.as_slice().unwrap();
    for bi in 0..bsz {
        for c in 0..ch {
            let plane = (bi * ch + c) * h * w;
            for pr in 0..pool {
                for pc in 0..pool {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for r in pr * bh..(pr + 1) * bh {
                        for cc in pc * bw..(pc + 1) * bw {
                            let idx = plane + r * w + cc;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[[bi, c, pr, pc]] = best;
                    argmax[((bi * ch + c) * pool + pr) * pool + pc] = best_idx;
                }
            }
        }
    }
    (
        y,
        MaxPoolCache {
            argmax,
            in_dim: (bsz, ch, h, w),
        },
    )
}

pub fn adaptive_max_pool_backward(cache: &MaxPoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let (bsz, ch, h, w) = cache.in_dim;
    let mut dx = Array4::zeros((bsz, ch, h, w));
    let ds = dx.as_slice_mut().unwrap();
    for (flat, &src) in cache.argmax.iter().enumerate() {
        ds[src] += dy.as_slice().unwrap()[flat];
    }
    dx
}

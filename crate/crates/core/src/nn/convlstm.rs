//! Convolutional LSTM cell.
//!
//! Gates are computed by a single convolution over the channel-concatenated
//! `[input, hidden]` tensor, producing `4 * hidden` channels split into
//! input / forget / output / candidate gates. "Same" padding keeps the
//! spatial size, so the hidden state is an `(hidden, N, N)` map.

use super::conv::{Conv2d, Conv2dCache};
use super::{Init, Module, ParamSlot, StateSlot};
use ndarray::{s, Array4, ArrayView4};

/// Channel-axis concatenation with guaranteed standard layout.
pub fn concat_channels(parts: &[ArrayView4<'_, f64>]) -> Array4<f64> {
    let (bsz, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::zeros((bsz, total, h, w));
    let mut at = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(s![.., at..at + c, .., ..]).assign(p);
        at += c;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub conv: Conv2d,
    pub in_channels: usize,
    pub hidden: usize,
}

pub struct ConvLstmState {
    pub h: Array4<f64>,
    pub c: Array4<f64>,
}

impl ConvLstmState {
    pub fn zeros(batch: usize, hidden: usize, n: usize) -> Self {
        Self {
            h: Array4::zeros((batch, hidden, n, n)),
            c: Array4::zeros((batch, hidden, n, n)),
        }
    }
}

pub struct ConvLstmStepCache {
    conv_cache: Conv2dCache,
    i: Array4<f64>,
    f: Array4<f64>,
    o: Array4<f64>,
    g: Array4<f64>,
    c_prev: Array4<f64>,
    tanh_c_new: Array4<f64>,
}

impl ConvLstmCell {
    pub fn new(in_channels: usize, hidden: usize, kernel: usize, init: &mut Init) -> Self {
        assert!(kernel % 2 == 1, "ConvLSTM kernel must be odd for same padding, got {kernel}");
        let conv = Conv2d::new(in_channels + hidden, 4 * hidden, kernel, 1, kernel / 2, init);
        Self {
            conv,
            in_channels,
            hidden,
        }
    }

    /// One recurrence step. Returns the new state plus the cache needed to
    /// run the matching backward step.
    pub fn step(&self, x: &Array4<f64>, state: &ConvLstmState) -> (ConvLstmState, ConvLstmStepCache) {
        let (bsz, cin, n, _) = x.dim();
        assert_eq!(cin, self.in_channels, "ConvLSTM input channels");
        let cat = concat_channels(&[x.view(), state.h.view()]);
        let (z, conv_cache) = self.conv.forward_cached(&cat);
        let hh = self.hidden;
        let i = z.slice(s![.., 0..hh, .., ..]).mapv(super::layers::sigmoid);
        let f = z.slice(s![.., hh..2 * hh, .., ..]).mapv(super::layers::sigmoid);
        let o = z.slice(s![.., 2 * hh..3 * hh, .., ..]).mapv(super::layers::sigmoid);
        let g = z.slice(s![.., 3 * hh..4 * hh, .., ..]).mapv(f64::tanh);
        let c_new = &f * &state.c + &i * &g;
        let tanh_c_new = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c_new;
        debug_assert_eq!(h_new.dim(), (bsz, hh, n, n));
        (
            ConvLstmState { h: h_new, c: c_new },
            ConvLstmStepCache {
                conv_cache,
                i,
                f,
                o,
                g,
                c_prev: state.c.clone(),
                tanh_c_new,
            },
        )
    }

    /// Backward through one step. `dh` and `dc` are gradients w.r.t. the new
    /// state; returns gradients w.r.t. the input and the previous state, and
    /// accumulates parameter gradients.
    pub fn backward_step(
        &mut self,
        cache: &ConvLstmStepCache,
        dh: &Array4<f64>,
        dc: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let hh = self.hidden;
        let d_o = dh * &cache.tanh_c_new;
        let dc_total = dh * &cache.o * cache.tanh_c_new.mapv(|t| 1.0 - t * t) + dc;
        let d_i = &dc_total * &cache.g;
        let d_f = &dc_total * &cache.c_prev;
        let d_g = &dc_total * &cache.i;
        let dc_prev = &dc_total * &cache.f;

        // Back through the gate nonlinearities to pre-activations.
        let dz_i = d_i * &cache.i * cache.i.mapv(|v| 1.0 - v);
        let dz_f = d_f * &cache.f * cache.f.mapv(|v| 1.0 - v);
        let dz_o = d_o * &cache.o * cache.o.mapv(|v| 1.0 - v);
        let dz_g = d_g * cache.g.mapv(|v| 1.0 - v * v);
        let dz = concat_channels(&[dz_i.view(), dz_f.view(), dz_o.view(), dz_g.view()]);

        let dcat = self.conv.backward(&cache.conv_cache, &dz);
        let dx = dcat.slice(s![.., 0..self.in_channels, .., ..]).to_owned();
        let dh_prev = dcat.slice(s![.., self.in_channels.., .., ..]).to_owned();
        let _ = hh;
        (dx, dh_prev, dc_prev)
    }
}

impl Module for ConvLstmCell {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        self.conv.for_each_param(&super::join(prefix, "gates"), f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        self.conv.for_each_state(&super::join(prefix, "gates"), f);
    }
}

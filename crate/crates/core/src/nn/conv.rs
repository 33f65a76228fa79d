//! 2-D convolution and transposed convolution via banded im2col + GEMM.
//!
//! The column matrix is built for a band of output rows at a time so the
//! working set stays bounded even at full grid size.

use super::{join, visit_ptensor, visit_state, Init, Module, PTensor, ParamSlot, StateSlot};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Ix4};

/// Target number of f64 in one im2col band (~32 MB).
const COL_BUDGET: usize = 4_000_000;

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Build the column matrix (`cin*k*k` x `rows*wo`) for output rows
/// `[row_start, row_start+rows)` of a stride-`stride` convolution over `x`.
#[allow(clippy::too_many_arguments)]
fn im2col_band(
    x: &ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    row_start: usize,
    rows: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let xs = x.as_slice().expect("input is standard layout");
    let band_w = rows * wo;
    let mut col = Array2::zeros((cin * k * k, band_w));
    let cs = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let crow = (c * k + kh) * k + kw;
                let base = crow * band_w;
                for orow in 0..rows {
                    let ih = (row_start + orow) * stride + kh;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    let xrow = (c * h + (ih - pad)) * w;
                    let out_base = base + orow * wo;
                    for ow in 0..wo {
                        let iw = ow * stride + kw;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        cs[out_base + ow] = xs[xrow + iw - pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_band`]: scatter-add `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_band(
    col: &ArrayView2<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    row_start: usize,
    rows: usize,
    dx: &mut ArrayViewMut3<'_, f64>,
) {
    let (cin, h, w) = dx.dim();
    let ds = dx.as_slice_mut().expect("grad buffer is standard layout");
    let cs = col.as_slice().expect("column matrix is standard layout");
    let band_w = rows * wo;
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let crow = (c * k + kh) * k + kw;
                let base = crow * band_w;
                for orow in 0..rows {
                    let ih = (row_start + orow) * stride + kh;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    let xrow = (c * h + (ih - pad)) * w;
                    let out_base = base + orow * wo;
                    for ow in 0..wo {
                        let iw = ow * stride + kw;
                        if iw < pad || iw - pad >= w {
                            continue;
                        }
                        ds[xrow + iw - pad] += cs[out_base + ow];
                    }
                }
            }
        }
    }
}

fn band_rows(ckk: usize, wo: usize, ho: usize) -> usize {
    (COL_BUDGET / (ckk * wo).max(1)).clamp(1, ho)
}

/// Plain convolution, `weight: (cout, cin, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: PTensor<Ix4>,
    pub b: PTensor<ndarray::Ix1>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: &mut Init) -> Self {
        Self {
            w: PTensor::new(init.normal((cout, cin, k, k))),
            b: PTensor::new(Array1::zeros(cout)),
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.v.dim().2;
        (conv_out(h, k, self.stride, self.pad), conv_out(w, k, self.stride, self.pad))
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, cin, h, w) = x.dim();
        let (cout, cin_w, k, _) = self.w.v.dim();
        assert_eq!(cin, cin_w, "conv input channels");
        let (ho, wo) = (conv_out(h, k, self.stride, self.pad), conv_out(w, k, self.stride, self.pad));
        let ckk = cin * k * k;
        let wmat = self.w.v.view().into_shape_with_order((cout, ckk)).unwrap();
        let mut y = Array4::zeros((bsz, cout, ho, wo));
        let band = band_rows(ckk, wo, ho);
        for bi in 0..bsz {
            let xb = x.slice(s![bi, .., .., ..]);
            let mut yb = y
                .slice_mut(s![bi, .., .., ..])
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            let mut row = 0;
            while row < ho {
                let rows = band.min(ho - row);
                let col = im2col_band(&xb, k, self.stride, self.pad, wo, row, rows);
                let mut yband = yb.slice_mut(s![.., row * wo..(row + rows) * wo]);
                general_mat_mul(1.0, &wmat, &col, 0.0, &mut yband);
                row += rows;
            }
            for co in 0..cout {
                let bias = self.b.v[co];
                yb.slice_mut(s![co, ..]).mapv_inplace(|v| v + bias);
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let y = self.forward(x);
        (y, Conv2dCache { x: x.clone() })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array4<f64>) -> Array4<f64> {
        let x = &cache.x;
        let (bsz, cin, h, w) = x.dim();
        let (cout, _, k, _) = self.w.v.dim();
        let (ho, wo) = (conv_out(h, k, self.stride, self.pad), conv_out(w, k, self.stride, self.pad));
        assert_eq!(dy.dim(), (bsz, cout, ho, wo), "conv backward shape");
        let ckk = cin * k * k;
        let wmat = self.w.v.view().into_shape_with_order((cout, ckk)).unwrap();
        let mut dwmat = self.w.g.view_mut().into_shape_with_order((cout, ckk)).unwrap();
        let mut dx = Array4::zeros((bsz, cin, h, w));
        let band = band_rows(ckk, wo, ho);
        for bi in 0..bsz {
            let xb = x.slice(s![bi, .., .., ..]);
            let dyb = dy
                .slice(s![bi, .., .., ..])
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            let mut dxb = dx.slice_mut(s![bi, .., .., ..]);
            let mut row = 0;
            while row < ho {
                let rows = band.min(ho - row);
                let col = im2col_band(&xb, k, self.stride, self.pad, wo, row, rows);
                let dyband = dyb.slice(s![.., row * wo..(row + rows) * wo]);
                // dW += dY_band * col^T
                general_mat_mul(1.0, &dyband, &col.view().reversed_axes(), 1.0, &mut dwmat);
                // dcol = W^T * dY_band, scattered back into dX
                let mut dcol = Array2::zeros((ckk, rows * wo));
                general_mat_mul(1.0, &wmat.view().reversed_axes(), &dyband, 0.0, &mut dcol);
                col2im_band(&dcol.view(), k, self.stride, self.pad, wo, row, rows, &mut dxb);
                row += rows;
            }
        }
        for bi in 0..bsz {
            for co in 0..cout {
                self.b.g[co] += dy.slice(s![bi, co, .., ..]).sum();
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        visit_ptensor(join(prefix, "weight"), &mut self.w, f);
        visit_ptensor(join(prefix, "bias"), &mut self.b, f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        visit_state(join(prefix, "weight"), &mut self.w.v, f);
        visit_state(join(prefix, "bias"), &mut self.b.v, f);
    }
}

/// Transposed convolution (fractionally strided), `weight: (cin, cout, k, k)`.
/// Output spatial size is `(h-1)*stride - 2*pad + k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: PTensor<Ix4>,
    pub b: PTensor<ndarray::Ix1>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTranspose2dCache {
    x: Array4<f64>,
}

impl ConvTranspose2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: &mut Init) -> Self {
        Self {
            w: PTensor::new(init.normal((cin, cout, k, k))),
            b: PTensor::new(Array1::zeros(cout)),
            stride,
            pad,
        }
    }

    pub fn out_len(&self, h: usize) -> usize {
        let k = self.w.v.dim().2;
        (h - 1) * self.stride + k - 2 * self.pad
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, cin, h, w) = x.dim();
        let (cin_w, cout, k, _) = self.w.v.dim();
        assert_eq!(cin, cin_w, "transposed conv input channels");
        let (hout, wout) = (self.out_len(h), self.out_len(w));
        // The adjoint convolution must map (hout, wout) back to (h, w).
        debug_assert_eq!(conv_out(hout, k, self.stride, self.pad), h);
        let cokk = cout * k * k;
        let wmat = self.w.v.view().into_shape_with_order((cin, cokk)).unwrap();
        let mut y = Array4::zeros((bsz, cout, hout, wout));
        let band = band_rows(cokk, w, h);
        for bi in 0..bsz {
            let xb = x
                .slice(s![bi, .., .., ..])
                .into_shape_with_order((cin, h * w))
                .unwrap();
            let mut yb = y.slice_mut(s![bi, .., .., ..]);
            let mut row = 0;
            while row < h {
                let rows = band.min(h - row);
                let xband = xb.slice(s![.., row * w..(row + rows) * w]);
                let mut tband = Array2::zeros((cokk, rows * w));
                general_mat_mul(1.0, &wmat.view().reversed_axes(), &xband, 0.0, &mut tband);
                col2im_band(&tband.view(), k, self.stride, self.pad, w, row, rows, &mut yb);
                row += rows;
            }
            for co in 0..cout {
                let bias = self.b.v[co];
                yb.slice_mut(s![co, .., ..]).mapv_inplace(|v| v + bias);
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, ConvTranspose2dCache) {
        let y = self.forward(x);
        (y, ConvTranspose2dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache, dy: &Array4<f64>) -> Array4<f64> {
        let x = &cache.x;
        let (bsz, cin, h, w) = x.dim();
        let (_, cout, k, _) = self.w.v.dim();
        let (hout, wout) = (self.out_len(h), self.out_len(w));
        assert_eq!(dy.dim(), (bsz, cout, hout, wout), "transposed conv backward shape");
        let cokk = cout * k * k;
        let wmat = self.w.v.view().into_shape_with_order((cin, cokk)).unwrap();
        let mut dwmat = self.w.g.view_mut().into_shape_with_order((cin, cokk)).unwrap();
        let mut dx = Array4::zeros((bsz, cin, h, w));
        let band = band_rows(cokk, w, h);
        for bi in 0..bsz {
            let dyb = dy.slice(s![bi, .., .., ..]);
            let xb = x
                .slice(s![bi, .., .., ..])
                .into_shape_with_order((cin, h * w))
                .unwrap();
            let mut dxb = dx
                .slice_mut(s![bi, .., .., ..])
                .into_shape_with_order((cin, h * w))
                .unwrap();
            let mut row = 0;
            while row < h {
                let rows = band.min(h - row);
                // Gathering from dY with the adjoint geometry yields both the
                // input gradient and the weight gradient.
                let col = im2col_band(&dyb, k, self.stride, self.pad, w, row, rows);
                let mut dxband = dxb.slice_mut(s![.., row * w..(row + rows) * w]);
                general_mat_mul(1.0, &wmat, &col, 0.0, &mut dxband);
                let xband = xb.slice(s![.., row * w..(row + rows) * w]);
                general_mat_mul(1.0, &xband, &col.view().reversed_axes(), 1.0, &mut dwmat);
                row += rows;
            }
        }
        for bi in 0..bsz {
            for co in 0..cout {
                self.b.g[co] += dy.slice(s![bi, co, .., ..]).sum();
            }
        }
        dx
    }
}

impl Module for ConvTranspose2d {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        visit_ptensor(join(prefix, "weight"), &mut self.w, f);
        visit_ptensor(join(prefix, "bias"), &mut self.b, f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        visit_state(join(prefix, "weight"), &mut self.w.v, f);
        visit_state(join(prefix, "bias"), &mut self.b.v, f);
    }
}

//! Stage one: occupancy probability-grid generation.
//!
//! A U-Net with skip connections encodes the stacked past-position grids, a
//! residual network encodes the scene crop, and a ConvLSTM decodes the fused
//! feature map into `t_f` two-class logit grids (occupied / not occupied).
//! Downsampling convolutions are 4x4 stride 2 with BatchNorm and LeakyReLU;
//! upsampling mirrors them with transposed convolutions and ReLU. The final
//! layers carry no saturating nonlinearity.

use super::{GridGenConfig, ModelError, ProbabilityGridSequence};
use crate::grid::GridSample;
use crate::nn::conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
use crate::nn::convlstm::{concat_channels, ConvLstmCell, ConvLstmState, ConvLstmStepCache};
use crate::nn::layers::{
    leaky_relu, leaky_relu_backward, BatchNorm2d, BatchNorm2dCache, Dropout, DropoutCache,
};
use crate::nn::loss::{occupancy_probabilities, pixel_ce, weighted_grid_ce};
use crate::nn::optim::Adam;
use crate::nn::{join, Init, Module, ParamSlot, StateSlot};
use ndarray::{s, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct DownBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct DownCache {
    conv: Conv2dCache,
    bn: Option<BatchNorm2dCache>,
    pre_act: Array4<f64>,
}

impl DownBlock {
    fn forward(&mut self, x: &Array4<f64>, slope: f64, training: bool) -> (Array4<f64>, DownCache) {
        let (z, conv) = self.conv.forward_cached(x);
        let (zb, bn) = if training {
            let (zb, c) = self.bn.forward_train(&z);
            (zb, Some(c))
        } else {
            (self.bn.forward_eval(&z), None)
        };
        let a = leaky_relu(&zb, slope);
        (a, DownCache { conv, bn, pre_act: zb })
    }

    fn backward(&mut self, cache: &DownCache, da: &Array4<f64>, slope: f64) -> Array4<f64> {
        let dz = leaky_relu_backward(&cache.pre_act, da, slope);
        let dz = self.bn.backward(cache.bn.as_ref().expect("backward requires a training forward"), &dz);
        self.conv.backward(&cache.conv, &dz)
    }
}

struct UpBlock {
    conv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
    dropout: Option<Dropout>,
}

struct UpCache {
    conv: ConvTranspose2dCache,
    bn: Option<BatchNorm2dCache>,
    drop: Option<DropoutCache>,
    pre_act: Option<Array4<f64>>,
}

impl UpBlock {
    fn forward(&mut self, x: &Array4<f64>, training: bool) -> (Array4<f64>, UpCache) {
        let (z, conv) = self.conv.forward_cached(x);
        let Some(bn) = self.bn.as_mut() else {
            // Outermost block: raw transposed convolution output.
            return (
                z,
                UpCache {
                    conv,
                    bn: None,
                    drop: None,
                    pre_act: None,
                },
            );
        };
        let (zb, bn_cache) = if training {
            let (zb, c) = bn.forward_train(&z);
            (zb, Some(c))
        } else {
            (bn.forward_eval(&z), None)
        };
        let (zd, drop) = match self.dropout.as_mut() {
            Some(d) if training => {
                let (zd, c) = d.forward_train(&zb);
                (zd, Some(c))
            }
            _ => (zb, None),
        };
        let a = leaky_relu(&zd, 0.0); // plain ReLU on the up path
        (
            a,
            UpCache {
                conv,
                bn: bn_cache,
                drop,
                pre_act: Some(zd),
            },
        )
    }

    fn backward(&mut self, cache: &UpCache, da: &Array4<f64>) -> Array4<f64> {
        let Some(bn) = self.bn.as_mut() else {
            return self.conv.backward(&cache.conv, da);
        };
        let mut dz = leaky_relu_backward(cache.pre_act.as_ref().unwrap(), da, 0.0);
        if let (Some(d), Some(dc)) = (self.dropout.as_ref(), cache.drop.as_ref()) {
            dz = d.backward(dc, &dz);
        }
        let dz = bn.backward(cache.bn.as_ref().expect("backward requires a training forward"), &dz);
        self.conv.backward(&cache.conv, &dz)
    }
}

/// U-Net encoder/decoder over the past-trajectory grid stack.
pub struct UNet {
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
    slope: f64,
    blocks: usize,
}

pub struct UNetCache {
    down: Vec<DownCache>,
    enc_outs: Vec<Array4<f64>>,
    up: Vec<UpCache>,
    skip_channels: Vec<usize>,
}

/// Channel width of encoder level `i`: doubles per level, capped at 8x base.
fn level_width(base: usize, i: usize) -> usize {
    base * (1usize << i.min(3))
}

impl UNet {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        blocks: usize,
        base: usize,
        slope: f64,
        dropout_p: f64,
        init: &mut Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(blocks >= 2);
        let mut downs = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let cin = if i == 0 { in_channels } else { level_width(base, i - 1) };
            downs.push(DownBlock {
                conv: Conv2d::new(cin, level_width(base, i), 4, 2, 1, init),
                bn: BatchNorm2d::new(level_width(base, i), init),
            });
        }
        let mut ups = Vec::with_capacity(blocks);
        for j in 0..blocks {
            if j == blocks - 1 {
                ups.push(UpBlock {
                    conv: ConvTranspose2d::new(2 * level_width(base, 0), out_channels, 4, 2, 1, init),
                    bn: None,
                    dropout: None,
                });
            } else {
                let cin = if j == 0 {
                    level_width(base, blocks - 1)
                } else {
                    2 * level_width(base, blocks - 1 - j)
                };
                let cout = level_width(base, blocks - 2 - j);
                ups.push(UpBlock {
                    conv: ConvTranspose2d::new(cin, cout, 4, 2, 1, init),
                    bn: Some(BatchNorm2d::new(cout, init)),
                    // The three innermost up blocks are regularized.
                    dropout: (j < 3 && dropout_p > 0.0).then(|| Dropout::new(dropout_p, rng)),
                });
            }
        }
        Self {
            downs,
            ups,
            slope,
            blocks,
        }
    }

    /// `(channels, spatial)` at every encoder level for grid size `n`;
    /// the last entry is the bottleneck.
    pub fn encoder_shapes(&self, n: usize, base: usize) -> Vec<(usize, usize)> {
        (0..self.blocks).map(|i| (level_width(base, i), n >> (i + 1))).collect()
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> (Array4<f64>, UNetCache) {
        let b = self.blocks;
        let mut down = Vec::with_capacity(b);
        let mut enc_outs = Vec::with_capacity(b);
        let mut cur = x.clone();
        for i in 0..b {
            let slope = self.slope;
            let (a, c) = self.downs[i].forward(&cur, slope, training);
            down.push(c);
            enc_outs.push(a.clone());
            cur = a;
        }
        let mut up = Vec::with_capacity(b);
        let mut skip_channels = Vec::with_capacity(b);
        let mut z = enc_outs[b - 1].clone();
        let mut out = None;
        for j in 0..b {
            let (a, c) = self.ups[j].forward(&z, training);
            up.push(c);
            if j == b - 1 {
                out = Some(a);
            } else {
                let skip = &enc_outs[b - 2 - j];
                skip_channels.push(a.dim().1);
                z = concat_channels(&[a.view(), skip.view()]);
            }
        }
        (
            out.unwrap(),
            UNetCache {
                down,
                enc_outs,
                up,
                skip_channels,
            },
        )
    }

    pub fn backward(&mut self, cache: &UNetCache, dout: &Array4<f64>) -> Array4<f64> {
        let b = self.blocks;
        // Gradients accumulated into each encoder activation.
        let mut denc: Vec<Array4<f64>> = cache.enc_outs.iter().map(|e| Array4::zeros(e.raw_dim())).collect();
        let mut da: Option<Array4<f64>> = None;
        for j in (0..b).rev() {
            let dz_in = if j == b - 1 {
                self.ups[j].backward(&cache.up[j], dout)
            } else {
                self.ups[j].backward(&cache.up[j], da.as_ref().unwrap())
            };
            if j == 0 {
                denc[b - 1] = &denc[b - 1] + &dz_in;
            } else {
                // Input of ups[j] was concat(up activation, skip e_{b-1-j}).
                let split = cache.skip_channels[j - 1];
                da = Some(dz_in.slice(s![.., ..split, .., ..]).to_owned());
                let dskip = dz_in.slice(s![.., split.., .., ..]).to_owned();
                denc[b - 1 - j] = &denc[b - 1 - j] + &dskip;
            }
        }
        // Encoder chain, deepest first; each level also receives the gradient
        // flowing down from the next encoder block.
        let mut carry: Option<Array4<f64>> = None;
        for i in (0..b).rev() {
            let total = match carry.take() {
                Some(c) => &denc[i] + &c,
                None => denc[i].clone(),
            };
            let slope = self.slope;
            carry = Some(self.downs[i].backward(&cache.down[i], &total, slope));
        }
        carry.unwrap()
    }
}

impl Module for UNet {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.conv.for_each_param(&join(prefix, &format!("down{i}.conv")), f);
            d.bn.for_each_param(&join(prefix, &format!("down{i}.bn")), f);
        }
        for (j, u) in self.ups.iter_mut().enumerate() {
            u.conv.for_each_param(&join(prefix, &format!("up{j}.conv")), f);
            if let Some(bn) = u.bn.as_mut() {
                bn.for_each_param(&join(prefix, &format!("up{j}.bn")), f);
            }
        }
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.conv.for_each_state(&join(prefix, &format!("down{i}.conv")), f);
            d.bn.for_each_state(&join(prefix, &format!("down{i}.bn")), f);
        }
        for (j, u) in self.ups.iter_mut().enumerate() {
            u.conv.for_each_state(&join(prefix, &format!("up{j}.conv")), f);
            if let Some(bn) = u.bn.as_mut() {
                bn.for_each_state(&join(prefix, &format!("up{j}.bn")), f);
            }
        }
    }
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

struct ResBlockCache {
    c1: Conv2dCache,
    b1: Option<BatchNorm2dCache>,
    pre1: Array4<f64>,
    c2: Conv2dCache,
    b2: Option<BatchNorm2dCache>,
}

impl ResBlock {
    fn new(ch: usize, init: &mut Init) -> Self {
        Self {
            conv1: Conv2d::new(ch, ch, 3, 1, 1, init),
            bn1: BatchNorm2d::new(ch, init),
            conv2: Conv2d::new(ch, ch, 3, 1, 1, init),
            bn2: BatchNorm2d::new(ch, init),
        }
    }

    /// `y = x + branch(x)`; a zeroed branch is the identity map.
    fn forward(&mut self, x: &Array4<f64>, training: bool) -> (Array4<f64>, ResBlockCache) {
        let (z1, c1) = self.conv1.forward_cached(x);
        let (zb1, b1) = if training {
            let (z, c) = self.bn1.forward_train(&z1);
            (z, Some(c))
        } else {
            (self.bn1.forward_eval(&z1), None)
        };
        let a1 = leaky_relu(&zb1, 0.0);
        let (z2, c2) = self.conv2.forward_cached(&a1);
        let (zb2, b2) = if training {
            let (z, c) = self.bn2.forward_train(&z2);
            (z, Some(c))
        } else {
            (self.bn2.forward_eval(&z2), None)
        };
        let y = x + &zb2;
        (
            y,
            ResBlockCache {
                c1,
                b1,
                pre1: zb1,
                c2,
                b2,
            },
        )
    }

    fn backward(&mut self, cache: &ResBlockCache, dy: &Array4<f64>) -> Array4<f64> {
        let dz2 = self.bn2.backward(cache.b2.as_ref().expect("training forward required"), dy);
        let da1 = self.conv2.backward(&cache.c2, &dz2);
        let dz1 = leaky_relu_backward(&cache.pre1, &da1, 0.0);
        let dz1 = self.bn1.backward(cache.b1.as_ref().expect("training forward required"), &dz1);
        let dx_branch = self.conv1.backward(&cache.c1, &dz1);
        dy + &dx_branch
    }
}

/// Scene encoder: two stride-2 downsampling blocks, `resnet_blocks` residual
/// blocks at quarter resolution, two transposed-convolution upsampling blocks
/// back to full resolution.
pub struct SceneEncoder {
    stem: Vec<DownBlock>,
    blocks: Vec<ResBlock>,
    up1: UpBlock,
    up2: UpBlock,
    slope: f64,
}

pub struct SceneEncoderCache {
    stem: Vec<DownCache>,
    blocks: Vec<ResBlockCache>,
    up1: UpCache,
    up2: UpCache,
}

impl SceneEncoder {
    pub fn new(
        out_channels: usize,
        n_blocks: usize,
        base: usize,
        slope: f64,
        init: &mut Init,
    ) -> Self {
        let stem = vec![
            DownBlock {
                conv: Conv2d::new(3, base, 4, 2, 1, init),
                bn: BatchNorm2d::new(base, init),
            },
            DownBlock {
                conv: Conv2d::new(base, 2 * base, 4, 2, 1, init),
                bn: BatchNorm2d::new(2 * base, init),
            },
        ];
        let blocks = (0..n_blocks).map(|_| ResBlock::new(2 * base, init)).collect();
        let up1 = UpBlock {
            conv: ConvTranspose2d::new(2 * base, base, 4, 2, 1, init),
            bn: Some(BatchNorm2d::new(base, init)),
            dropout: None,
        };
        let up2 = UpBlock {
            conv: ConvTranspose2d::new(base, out_channels, 4, 2, 1, init),
            bn: None,
            dropout: None,
        };
        Self {
            stem,
            blocks,
            up1,
            up2,
            slope,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, training: bool) -> (Array4<f64>, SceneEncoderCache) {
        let mut stem_caches = Vec::with_capacity(2);
        let mut cur = x.clone();
        for sb in self.stem.iter_mut() {
            let (a, c) = sb.forward(&cur, self.slope, training);
            stem_caches.push(c);
            cur = a;
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in self.blocks.iter_mut() {
            let (y, c) = blk.forward(&cur, training);
            block_caches.push(c);
            cur = y;
        }
        let (u1, up1c) = self.up1.forward(&cur, training);
        let (out, up2c) = self.up2.forward(&u1, training);
        (
            out,
            SceneEncoderCache {
                stem: stem_caches,
                blocks: block_caches,
                up1: up1c,
                up2: up2c,
            },
        )
    }

    pub fn backward(&mut self, cache: &SceneEncoderCache, dout: &Array4<f64>) -> Array4<f64> {
        let du1 = self.up2.backward(&cache.up2, dout);
        let mut d = self.up1.backward(&cache.up1, &du1);
        for (blk, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            d = blk.backward(c, &d);
        }
        for (sb, c) in self.stem.iter_mut().zip(cache.stem.iter()).rev() {
            let slope = self.slope;
            d = sb.backward(c, &d, slope);
        }
        d
    }
}

impl Module for SceneEncoder {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        for (i, sb) in self.stem.iter_mut().enumerate() {
            sb.conv.for_each_param(&join(prefix, &format!("stem{i}.conv")), f);
            sb.bn.for_each_param(&join(prefix, &format!("stem{i}.bn")), f);
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv1.for_each_param(&join(prefix, &format!("res{i}.conv1")), f);
            blk.bn1.for_each_param(&join(prefix, &format!("res{i}.bn1")), f);
            blk.conv2.for_each_param(&join(prefix, &format!("res{i}.conv2")), f);
            blk.bn2.for_each_param(&join(prefix, &format!("res{i}.bn2")), f);
        }
        self.up1.conv.for_each_param(&join(prefix, "up1.conv"), f);
        if let Some(bn) = self.up1.bn.as_mut() {
            bn.for_each_param(&join(prefix, "up1.bn"), f);
        }
        self.up2.conv.for_each_param(&join(prefix, "up2.conv"), f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        for (i, sb) in self.stem.iter_mut().enumerate() {
            sb.conv.for_each_state(&join(prefix, &format!("stem{i}.conv")), f);
            sb.bn.for_each_state(&join(prefix, &format!("stem{i}.bn")), f);
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv1.for_each_state(&join(prefix, &format!("res{i}.conv1")), f);
            blk.bn1.for_each_state(&join(prefix, &format!("res{i}.bn1")), f);
            blk.conv2.for_each_state(&join(prefix, &format!("res{i}.conv2")), f);
            blk.bn2.for_each_state(&join(prefix, &format!("res{i}.bn2")), f);
        }
        self.up1.conv.for_each_state(&join(prefix, "up1.conv"), f);
        if let Some(bn) = self.up1.bn.as_mut() {
            bn.for_each_state(&join(prefix, "up1.bn"), f);
        }
        self.up2.conv.for_each_state(&join(prefix, "up2.conv"), f);
    }
}

/// The full probability-grid generator.
pub struct GridGenModel {
    pub cfg: GridGenConfig,
    pub unet: UNet,
    pub scene_enc: SceneEncoder,
    pub cell: ConvLstmCell,
    pub head: Conv2d,
}

pub struct GridGenCache {
    unet: UNetCache,
    scene: SceneEncoderCache,
    steps: Vec<ConvLstmStepCache>,
    heads: Vec<Conv2dCache>,
    fused_channels: (usize, usize),
}

impl GridGenModel {
    pub fn new(cfg: GridGenConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut init = Init::new(&mut rng, cfg.init_std);
        let unet = UNet::new(
            cfg.t_h,
            cfg.traj_feat_channels,
            cfg.unet_blocks,
            cfg.unet_base_channels,
            cfg.leaky_slope,
            cfg.dropout,
            &mut init,
            &mut dropout_rng,
        );
        let scene_enc = SceneEncoder::new(
            cfg.scene_feat_channels,
            cfg.resnet_blocks,
            cfg.resnet_base_channels,
            cfg.leaky_slope,
            &mut init,
        );
        let fused = cfg.traj_feat_channels + cfg.scene_feat_channels;
        let cell = ConvLstmCell::new(fused, cfg.convlstm_hidden, cfg.convlstm_kernel, &mut init);
        let head = Conv2d::new(cfg.convlstm_hidden, 2, 1, 1, 0, &mut init);
        Ok(Self {
            cfg,
            unet,
            scene_enc,
            cell,
            head,
        })
    }

    /// Full forward pass: `(B, t_h, N, N)` past grids and `(B, 3, N, N)`
    /// scene crops to `t_f` logit tensors of shape `(B, 2, N, N)`.
    pub fn forward(
        &mut self,
        past: &Array4<f64>,
        scene: &Array4<f64>,
        training: bool,
    ) -> (Vec<Array4<f64>>, GridGenCache) {
        let (bsz, t_h, n, _) = past.dim();
        assert_eq!(t_h, self.cfg.t_h, "past channels");
        assert_eq!(n, self.cfg.n, "grid size");
        assert_eq!(scene.dim(), (bsz, 3, n, n), "scene shape");
        let (traj_feat, unet_cache) = self.unet.forward(past, training);
        let (scene_feat, scene_cache) = self.scene_enc.forward(scene, training);
        let fused = concat_channels(&[traj_feat.view(), scene_feat.view()]);
        let mut state = ConvLstmState::zeros(bsz, self.cfg.convlstm_hidden, n);
        let mut logits = Vec::with_capacity(self.cfg.t_f);
        let mut steps = Vec::with_capacity(self.cfg.t_f);
        let mut heads = Vec::with_capacity(self.cfg.t_f);
        for _ in 0..self.cfg.t_f {
            let (next, cache) = self.cell.step(&fused, &state);
            let (logit, head_cache) = self.head.forward_cached(&next.h);
            logits.push(logit);
            steps.push(cache);
            heads.push(head_cache);
            state = next;
        }
        (
            logits,
            GridGenCache {
                unet: unet_cache,
                scene: scene_cache,
                steps,
                heads,
                fused_channels: (self.cfg.traj_feat_channels, self.cfg.scene_feat_channels),
            },
        )
    }

    /// Backward through the unrolled decoder and both encoders. The fused
    /// feature tensor is shared by every step, so its gradient is the sum of
    /// the per-step input gradients.
    pub fn backward(&mut self, cache: &GridGenCache, dlogits: &[Array4<f64>]) {
        let t_f = cache.steps.len();
        assert_eq!(dlogits.len(), t_f);
        let (bsz, _, n, _) = dlogits[0].dim();
        let hh = self.cfg.convlstm_hidden;
        let mut dh_carry = Array4::zeros((bsz, hh, n, n));
        let mut dc = Array4::zeros((bsz, hh, n, n));
        let fused_ch = cache.fused_channels.0 + cache.fused_channels.1;
        let mut dfused = Array4::zeros((bsz, fused_ch, n, n));
        for t in (0..t_f).rev() {
            let dh_head = self.head.backward(&cache.heads[t], &dlogits[t]);
            let dh = &dh_head + &dh_carry;
            let (dx, dh_prev, dc_prev) = self.cell.backward_step(&cache.steps[t], &dh, &dc);
            dfused += &dx;
            dh_carry = dh_prev;
            dc = dc_prev;
        }
        let split = cache.fused_channels.0;
        let dtraj = dfused.slice(s![.., ..split, .., ..]).to_owned();
        let dscene = dfused.slice(s![.., split.., .., ..]).to_owned();
        self.unet.backward(&cache.unet, &dtraj);
        self.scene_enc.backward(&cache.scene, &dscene);
    }

    /// Occupancy probabilities for one sample (evaluation mode): softmax over
    /// the two logits, occupied channel, shape `(t_f, N, N)`.
    pub fn forward_probabilities(&mut self, sample: &GridSample) -> ProbabilityGridSequence {
        let n = self.cfg.n;
        let past3 = sample.past_grids().to_dense();
        let mut past = Array4::zeros((1, self.cfg.t_h, n, n));
        past.slice_mut(s![0, .., .., ..]).assign(&past3);
        let mut scene = Array4::zeros((1, 3, n, n));
        scene.slice_mut(s![0, .., .., ..]).assign(&sample.scene);
        let (logits, _) = self.forward(&past, &scene, false);
        let probs = occupancy_probabilities(&logits);
        ProbabilityGridSequence {
            probs: probs.slice(s![0, .., .., ..]).to_owned(),
        }
    }
}

impl Module for GridGenModel {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        self.unet.for_each_param(&join(prefix, "unet"), f);
        self.scene_enc.for_each_param(&join(prefix, "scene"), f);
        self.cell.for_each_param(&join(prefix, "convlstm"), f);
        self.head.for_each_param(&join(prefix, "head"), f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        self.unet.for_each_state(&join(prefix, "unet"), f);
        self.scene_enc.for_each_state(&join(prefix, "scene"), f);
        self.cell.for_each_state(&join(prefix, "convlstm"), f);
        self.head.for_each_state(&join(prefix, "head"), f);
    }
}

/// Weighted two-class cross-entropy over the logit grids (see
/// [`weighted_grid_ce`]); the occupied class carries `positive_class_weight`.
pub fn grid_loss(logits: &[Array4<f64>], targets: &Array4<f64>, positive_class_weight: f64) -> f64 {
    weighted_grid_ce(logits, targets, positive_class_weight, false).0
}

pub fn grid_loss_with_grad(
    logits: &[Array4<f64>],
    targets: &Array4<f64>,
    positive_class_weight: f64,
) -> (f64, Vec<Array4<f64>>) {
    let (loss, g) = weighted_grid_ce(logits, targets, positive_class_weight, true);
    (loss, g.unwrap())
}

struct SegNet<'a> {
    enc: &'a mut SceneEncoder,
    head: &'a mut Conv2d,
}

impl Module for SegNet<'_> {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>)) {
        self.enc.for_each_param(&join(prefix, "encoder"), f);
        self.head.for_each_param(&join(prefix, "seg_head"), f);
    }

    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>)) {
        self.enc.for_each_state(&join(prefix, "encoder"), f);
        self.head.for_each_state(&join(prefix, "seg_head"), f);
    }
}

/// One image/label pair for segmentation pretraining. Tensors are
/// `(3, H, W)` in `[0, 1]` and `(H, W)` class indices.
pub struct SegPair {
    pub image: Array3<f64>,
    pub labels: Array2<usize>,
}

/// Pretrain the scene encoder on per-pixel classification: a temporary 1x1
/// convolution head maps features to `n_classes` logits, per-pixel
/// cross-entropy is minimized for `steps` batches of random `crop_n` crops,
/// and the head is discarded. With `steps = 0` the encoder is untouched.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_scene_encoder(
    enc: &mut SceneEncoder,
    scene_feat_channels: usize,
    pairs: &[SegPair],
    n_classes: usize,
    crop_n: usize,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64, ModelError> {
    if n_classes < 2 {
        return Err(ModelError::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    for (i, p) in pairs.iter().enumerate() {
        let (_, h, w) = p.image.dim();
        if p.labels.dim() != (h, w) {
            return Err(ModelError::Config(format!(
                "pair {i}: label map {:?} does not share the image resolution {:?}",
                p.labels.dim(),
                (h, w)
            )));
        }
        if h < crop_n || w < crop_n {
            return Err(ModelError::Config(format!(
                "pair {i}: image {h}x{w} smaller than crop size {crop_n}"
            )));
        }
        if let Some(bad) = p.labels.iter().find(|c| **c >= n_classes) {
            return Err(ModelError::Config(format!("pair {i}: label {bad} out of range")));
        }
    }
    if steps == 0 {
        return Ok(f64::NAN);
    }
    if pairs.is_empty() {
        return Err(ModelError::Config("no training pairs supplied".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_std = (1.0 / scene_feat_channels as f64).sqrt();
    let mut head = {
        let mut init = Init::new(&mut rng, head_std);
        Conv2d::new(scene_feat_channels, n_classes, 1, 1, 0, &mut init)
    };
    let mut adam = Adam::new(lr);
    let mut last_loss = f64::NAN;
    for _ in 0..steps {
        let mut images = Array4::zeros((batch_size, 3, crop_n, crop_n));
        let mut labels = Array3::zeros((batch_size, crop_n, crop_n));
        for bi in 0..batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (_, h, w) = p.image.dim();
            let r0 = rng.random_range(0..=h - crop_n);
            let c0 = rng.random_range(0..=w - crop_n);
            images
                .slice_mut(s![bi, .., .., ..])
                .assign(&p.image.slice(s![.., r0..r0 + crop_n, c0..c0 + crop_n]));
            labels
                .slice_mut(s![bi, .., ..])
                .assign(&p.labels.slice(s![r0..r0 + crop_n, c0..c0 + crop_n]));
        }
        let (feat, enc_cache) = enc.forward(&images, true);
        let (logits, head_cache) = head.forward_cached(&feat);
        let (loss, dlogits) = pixel_ce(&logits, &labels, true);
        last_loss = loss;
        SegNet {
            enc: &mut *enc,
            head: &mut head,
        }
        .zero_grads();
        let dfeat = head.backward(&head_cache, &dlogits.unwrap());
        enc.backward(&enc_cache, &dfeat);
        adam.step(&mut SegNet {
            enc: &mut *enc,
            head: &mut head,
        });
    }
    Ok(last_loss)
}

/// Pixel accuracy of the (encoder + temporary head) pair is not meaningful
/// after the head is dropped, so evaluation trains its own probe head; this
/// helper instead reports accuracy of a freshly attached head trained by
/// [`pretrain_scene_encoder`] — used by tests that keep the head alive.
pub fn seg_pixel_accuracy(
    enc: &mut SceneEncoder,
    head: &mut Conv2d,
    pairs: &[SegPair],
    crop_n: usize,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in pairs.iter() {
        let (_, h, w) = p.image.dim();
        let (r0, c0) = ((h - crop_n) / 2, (w - crop_n) / 2);
        let mut img = Array4::zeros((1, 3, crop_n, crop_n));
        img.slice_mut(s![0, .., .., ..])
            .assign(&p.image.slice(s![.., r0..r0 + crop_n, c0..c0 + crop_n]));
        let (feat, _) = enc.forward(&img, false);
        let logits = head.forward(&feat);
        let pred = crate::nn::loss::argmax_classes(&logits);
        for r in 0..crop_n {
            for c in 0..crop_n {
                if pred[[0, r, c]] == p.labels[[r0 + r, c0 + c]] {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    correct as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GridGenConfig {
        GridGenConfig {
            n: 8,
            t_h: 3,
            t_f: 2,
            unet_blocks: 2,
            resnet_blocks: 1,
            traj_feat_channels: 10,
            scene_feat_channels: 10,
            unet_base_channels: 2,
            resnet_base_channels: 2,
            convlstm_hidden: 2,
            convlstm_kernel: 3,
            dropout: 0.0,
            positive_class_weight: 8.0,
            ..GridGenConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(GridGenConfig::default().validate().is_ok());
        let mut bad = GridGenConfig::default();
        bad.n = 100; // not divisible by 2^7
        assert!(bad.validate().is_err());
        let mut bad = GridGenConfig::default();
        bad.traj_feat_channels = 11;
        assert!(bad.validate().is_err());
        let mut bad = GridGenConfig::default();
        bad.convlstm_kernel = 10;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unet_bottleneck_is_one_by_one_at_full_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng, 0.02);
        let unet = UNet::new(8, 10, 7, 2, 0.2, 0.5, &mut init, &mut drng);
        let shapes = unet.encoder_shapes(128, 2);
        assert_eq!(shapes.len(), 7);
        assert_eq!(shapes.last().unwrap().1, 1, "bottleneck spatial size");
    }

    #[test]
    fn unet_shape_contract_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut drng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut rng, 0.02);
        let mut unet = UNet::new(3, 10, 3, 4, 0.2, 0.5, &mut init, &mut drng);
        let x = Array4::zeros((2, 3, 16, 16));
        let (y, _) = unet.forward(&x, false);
        assert_eq!(y.dim(), (2, 10, 16, 16));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scene_encoder_shape_contract_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut init = Init::new(&mut rng, 0.02);
        let mut enc = SceneEncoder::new(10, 2, 4, 0.2, &mut init);
        let x = Array4::zeros((2, 3, 16, 16));
        let (y, _) = enc.forward(&x, false);
        assert_eq!(y.dim(), (2, 10, 16, 16));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_block_with_zeroed_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init::new(&mut rng, 0.02);
        let mut blk = ResBlock::new(3, &mut init);
        // Zero the closing convolution and BatchNorm shift: branch output 0.
        blk.conv2.w.v.fill(0.0);
        blk.conv2.b.v.fill(0.0);
        blk.bn2.gamma.v.fill(0.0);
        blk.bn2.beta.v.fill(0.0);
        let x = {
            let mut init = Init::new(&mut rng, 1.0);
            init.normal((2, 3, 6, 6))
        };
        let (y, _) = blk.forward(&x, false);
        let err = (&y - &x).mapv(f64::abs).sum();
        assert!(err < 1e-12, "identity violated by {err}");
    }

    #[test]
    fn gridgen_end_to_end_shapes_and_probabilities() {
        let mut model = GridGenModel::new(tiny_cfg(), 7).unwrap();
        let past = Array4::zeros((2, 3, 8, 8));
        let scene = Array4::zeros((2, 3, 8, 8));
        let (logits, _) = model.forward(&past, &scene, false);
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].dim(), (2, 2, 8, 8));
        let probs = occupancy_probabilities(&logits);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn gridgen_gradients_match_finite_differences() {
        // Whole-model check at tiny dimensions: U-Net + scene encoder +
        // ConvLSTM + head against the weighted cross-entropy loss.
        let cfg = tiny_cfg();
        let w_pos = cfg.positive_class_weight;
        let mut model = GridGenModel::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut init = Init::new(&mut rng, 0.6);
        let past: Array4<f64> = init.normal((1, 3, 8, 8));
        let scene: Array4<f64> = init.normal((1, 3, 8, 8));
        let mut targets = Array4::zeros((1, 2, 8, 8));
        targets[[0, 0, 3, 4]] = 1.0;
        targets[[0, 1, 2, 6]] = 1.0;

        let (logits, cache) = model.forward(&past, &scene, true);
        let (_, dlogits) = grid_loss_with_grad(&logits, &targets, w_pos);
        model.zero_grads();
        model.backward(&cache, &dlogits);

        // Collect analytic gradients for a stratified sample of parameters.
        let mut names = Vec::new();
        model.for_each_param("", &mut |name, p| {
            names.push((name, p.value.len()));
        });
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        // BatchNorm batch statistics change with each probe, so the loss
        // function is re-evaluated through a full training-mode forward.
        for (name, len) in names.iter() {
            let probe_idx = [0, len / 2, len - 1];
            for &idx in probe_idx.iter() {
                let mut analytic = 0.0;
                model.for_each_param("", &mut |n, p| {
                    if &n == name {
                        analytic = p.grad[idx];
                    }
                });
                let mut eval_at = |delta: f64, model: &mut GridGenModel| -> f64 {
                    model.for_each_param("", &mut |n, p| {
                        if &n == name {
                            p.value[idx] += delta;
                        }
                    });
                    let (logits, _) = model.forward(&past, &scene, true);
                    let loss = grid_loss(&logits, &targets, w_pos);
                    model.for_each_param("", &mut |n, p| {
                        if &n == name {
                            p.value[idx] -= delta;
                        }
                    });
                    loss
                };
                let fp = eval_at(eps, &mut model);
                let fm = eval_at(-eps, &mut model);
                let fd = (fp - fm) / (2.0 * eps);
                let rel = (fd - analytic).abs() / (fd.abs() + analytic.abs()).max(1e-7);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 5e-4, "end-to-end rel err {max_rel}");
    }

    #[test]
    fn init_statistics_match_configured_std() {
        let mut model = GridGenModel::new(GridGenConfig::default(), 3).unwrap();
        let mut values = Vec::new();
        model.for_each_state("", &mut |name, slot| {
            // Convolution kernels only: 4-D weight tensors.
            if name.ends_with(".weight") && slot.shape.len() == 4 {
                values.extend_from_slice(slot.data);
            }
        });
        assert!(values.len() >= 100_000, "need at least 1e5 samples, got {}", values.len());
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() / 0.02 < 0.10, "std {std}");
        assert!(mean.abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn pretrain_zero_steps_leaves_encoder_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng, 0.02);
        let mut enc = SceneEncoder::new(4, 1, 2, 0.2, &mut init);
        let mut before = Vec::new();
        enc.for_each_state("", &mut |_, s| before.push(s.data.to_vec()));
        let pairs = vec![SegPair {
            image: Array3::zeros((3, 16, 16)),
            labels: Array2::zeros((16, 16)),
        }];
        pretrain_scene_encoder(&mut enc, 4, &pairs, 2, 8, 0, 2, 1e-3, 0).unwrap();
        let mut after = Vec::new();
        enc.for_each_state("", &mut |_, s| after.push(s.data.to_vec()));
        assert_eq!(before, after);
    }

    #[test]
    fn pretrain_rejects_resolution_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng, 0.02);
        let mut enc = SceneEncoder::new(4, 1, 2, 0.2, &mut init);
        let pairs = vec![SegPair {
            image: Array3::zeros((3, 16, 16)),
            labels: Array2::zeros((8, 16)),
        }];
        let err = pretrain_scene_encoder(&mut enc, 4, &pairs, 2, 8, 1, 2, 1e-3, 0);
        assert!(matches!(err, Err(ModelError::Config(_))));
    }

    #[test]
    fn pretrain_learns_separable_two_class_colors() {
        // Flat colors: left half red-ish terrain, right half gray path. A few
        // hundred steps reach high pixel accuracy.
        let n = 16usize;
        let mut image = Array3::zeros((3, n, n));
        let mut labels = Array2::zeros((n, n));
        for r in 0..n {
            for c in 0..n {
                if c < n / 2 {
                    image[[0, r, c]] = 0.9;
                    labels[[r, c]] = 0;
                } else {
                    image[[0, r, c]] = 0.2;
                    image[[1, r, c]] = 0.4;
                    image[[2, r, c]] = 0.8;
                    labels[[r, c]] = 1;
                }
            }
        }
        let pairs = vec![SegPair { image, labels }];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(&mut rng, 0.02);
        let mut enc = SceneEncoder::new(4, 1, 4, 0.2, &mut init);
        // Keep a head for accuracy evaluation by re-running the pretrain loop
        // with the same seed, then attaching a fresh head trained briefly.
        pretrain_scene_encoder(&mut enc, 4, &pairs, 2, 8, 200, 4, 2e-3, 17).unwrap();
        // Linear probe on the pretrained features.
        let mut head = {
            let mut hrng = ChaCha8Rng::seed_from_u64(23);
            let mut hinit = Init::new(&mut hrng, 0.5);
            Conv2d::new(4, 2, 1, 1, 0, &mut hinit)
        };
        let mut adam = Adam::new(5e-2);
        for _ in 0..60 {
            let mut img = Array4::zeros((1, 3, 8, 8));
            img.slice_mut(s![0, .., .., ..]).assign(&pairs[0].image.slice(s![.., 4..12, 4..12]));
            let mut lbl = Array3::zeros((1, 8, 8));
            lbl.slice_mut(s![0, .., ..]).assign(&pairs[0].labels.slice(s![4..12, 4..12]));
            let (feat, _) = enc.forward(&img, false);
            let (logits, hc) = head.forward_cached(&feat);
            let (_, dl) = pixel_ce(&logits, &lbl, true);
            head.zero_grads();
            head.backward(&hc, &dl.unwrap());
            adam.step(&mut head);
        }
        let acc = seg_pixel_accuracy(&mut enc, &mut head, &pairs, 8);
        assert!(acc > 0.9, "pixel accuracy {acc}");
    }

    #[test]
    fn pretrain_head_emits_n_classes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init::new(&mut rng, 0.05);
        let head = Conv2d::new(4, 6, 1, 1, 0, &mut init);
        let x = Array4::zeros((1, 4, 8, 8));
        assert_eq!(head.forward(&x).dim(), (1, 6, 8, 8));
    }
}

//! Encoder architectures: staged conv nets with per-stage tap points.
//!
//! Each stage exposes its (channel-scaled) output as a tap activation; the
//! head global-average-pools the last tap and projects it to the embedding.
//! Channel scales sit outside the trainable parameter vector so pruning
//! masks survive fine-tuning.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::ArchId;
use crate::error::{Error, Result};

use super::conv::{dim4, relu, relu_backward, Conv2d, ConvGrad, Linear, LinearGrad};

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSpec {
    /// conv(kernel, stride) + relu
    Conv { out: usize, kernel: usize, stride: usize },
    /// residual block; `bottleneck` uses the 1x1-3x3-1x1 form
    Residual { out: usize, stride: usize, bottleneck: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub id: String,
    pub input_channels: usize,
    pub stages: Vec<Vec<BlockSpec>>,
    pub embedding_dim: usize,
}

impl ArchSpec {
    pub fn from_id(id: ArchId) -> Self {
        match id {
            ArchId::TinyCnn => ArchSpec {
                id: "tiny-cnn".into(),
                input_channels: 3,
                stages: vec![
                    vec![BlockSpec::Conv { out: 16, kernel: 3, stride: 2 }],
                    vec![BlockSpec::Conv { out: 32, kernel: 3, stride: 2 }],
                ],
                embedding_dim: 32,
            },
            ArchId::Rn18 => Self::resnet("rn18", &[2, 2, 2, 2], false, 512),
            ArchId::Rn34 => Self::resnet("rn34", &[3, 4, 6, 3], false, 512),
            ArchId::Rn50 => Self::resnet("rn50", &[3, 4, 6, 3], true, 2048),
        }
    }

    fn resnet(id: &str, depths: &[usize; 4], bottleneck: bool, embedding_dim: usize) -> Self {
        let widths = if bottleneck {
            [256, 512, 1024, 2048]
        } else {
            [64, 128, 256, 512]
        };
        let mut stages = Vec::new();
        for (si, (&depth, &out)) in depths.iter().zip(widths.iter()).enumerate() {
            let mut blocks = Vec::new();
            if si == 0 {
                blocks.push(BlockSpec::Conv { out: 64, kernel: 3, stride: 1 });
            }
            for bi in 0..depth {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BlockSpec::Residual { out, stride, bottleneck });
            }
            stages.push(blocks);
        }
        ArchSpec {
            id: id.into(),
            input_channels: 3,
            stages,
            embedding_dim,
        }
    }

    /// Tiny custom architecture for gradient-check tests.
    pub fn micro(channels: &[usize], embedding_dim: usize) -> Self {
        ArchSpec {
            id: "micro".into(),
            input_channels: 3,
            stages: channels
                .iter()
                .map(|&c| vec![BlockSpec::Conv { out: c, kernel: 3, stride: 2 }])
                .collect(),
            embedding_dim,
        }
    }

    pub fn tap_count(&self) -> usize {
        self.stages.len()
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv(Conv2d),
    Residual {
        convs: Vec<Conv2d>,
        proj: Option<Conv2d>,
    },
}

impl Block {
    fn convs(&self) -> Vec<&Conv2d> {
        match self {
            Block::Conv(c) => vec![c],
            Block::Residual { convs, proj } => {
                let mut all: Vec<&Conv2d> = convs.iter().collect();
                if let Some(p) = proj {
                    all.push(p);
                }
                all
            }
        }
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        match self {
            Block::Conv(c) => vec![c],
            Block::Residual { convs, proj } => {
                let mut all: Vec<&mut Conv2d> = convs.iter_mut().collect();
                if let Some(p) = proj {
                    all.push(p);
                }
                all
            }
        }
    }
}

enum BlockCache {
    Conv {
        x: Array4<f64>,
        pre: Array4<f64>,
    },
    Residual {
        x: Array4<f64>,
        /// pre-activation of each inner conv, in forward order
        pres: Vec<Array4<f64>>,
        /// input to each inner conv, in forward order
        inputs: Vec<Array4<f64>>,
        /// pre-activation of the block output (sum + skip)
        out_pre: Array4<f64>,
    },
}

/// Feature extractor with per-stage tap points.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: ArchSpec,
    stages: Vec<Vec<Block>>,
    head: Linear,
    /// Per-stage channel scales applied at the tap (pruning masks live here).
    pub stage_scales: Vec<Array1<f64>>,
}

pub struct ForwardCache {
    blocks: Vec<Vec<BlockCache>>,
    /// Stage outputs before channel scaling.
    stage_raw: Vec<Array4<f64>>,
    /// Pooled features feeding the head.
    pooled: Array2<f64>,
    /// Spatial size of the last tap, needed to un-pool.
    last_spatial: (usize, usize),
}

/// Gradients for every trainable parameter plus tap scales and input pixels.
pub struct EncoderGrads {
    stage_convs: Vec<Vec<ConvGrad>>,
    head: LinearGrad,
    pub scales: Vec<Array1<f64>>,
    pub input: Array4<f64>,
}

impl Encoder {
    pub fn init(spec: &ArchSpec, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut in_ch = spec.input_channels;
        for stage_spec in &spec.stages {
            let mut blocks = Vec::new();
            for block_spec in stage_spec {
                match *block_spec {
                    BlockSpec::Conv { out, kernel, stride } => {
                        blocks.push(Block::Conv(Conv2d::init(
                            &mut rng,
                            out,
                            in_ch,
                            kernel,
                            stride,
                            kernel / 2,
                        )));
                        in_ch = out;
                    }
                    BlockSpec::Residual { out, stride, bottleneck } => {
                        let convs = if bottleneck {
                            let mid = out / 4;
                            vec![
                                Conv2d::init(&mut rng, mid, in_ch, 1, 1, 0),
                                Conv2d::init(&mut rng, mid, mid, 3, stride, 1),
                                Conv2d::init(&mut rng, out, mid, 1, 1, 0),
                            ]
                        } else {
                            vec![
                                Conv2d::init(&mut rng, out, in_ch, 3, stride, 1),
                                Conv2d::init(&mut rng, out, out, 3, 1, 1),
                            ]
                        };
                        let proj = if stride != 1 || in_ch != out {
                            Some(Conv2d::init(&mut rng, out, in_ch, 1, stride, 0))
                        } else {
                            None
                        };
                        blocks.push(Block::Residual { convs, proj });
                        in_ch = out;
                    }
                }
            }
            stages.push(blocks);
        }
        let stage_scales = spec
            .stages
            .iter()
            .scan(spec.input_channels, |ch, stage| {
                for b in stage {
                    *ch = match *b {
                        BlockSpec::Conv { out, .. } => out,
                        BlockSpec::Residual { out, .. } => out,
                    };
                }
                Some(Array1::ones(*ch))
            })
            .collect();
        let head = Linear::init(&mut rng, spec.embedding_dim, in_ch);
        Encoder {
            spec: spec.clone(),
            stages,
            head,
            stage_scales,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.stage_scales.iter().map(|s| s.len()).collect()
    }

    /// Full forward pass: embeddings, tap activations, and backward cache.
    pub fn forward_full(&self, x: &Array4<f64>) -> (Array2<f64>, Vec<Array4<f64>>, ForwardCache) {
        let mut cur = x.clone();
        let mut blocks_cache = Vec::new();
        let mut stage_raw = Vec::new();
        let mut taps = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let mut stage_cache = Vec::new();
            for block in stage {
                let (out, cache) = block_forward(block, &cur);
                stage_cache.push(cache);
                cur = out;
            }
            blocks_cache.push(stage_cache);
            stage_raw.push(cur.clone());
            // channel scaling at the tap
            let scales = &self.stage_scales[si];
            for c in 0..scales.len() {
                let s = scales[c];
                if s != 1.0 {
                    cur.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s);
                }
            }
            taps.push(cur.clone());
        }
        let (b, ch, h, w) = dim4(&cur);
        let denom = (h * w) as f64;
        let mut pooled = Array2::<f64>::zeros((b, ch));
        for bi in 0..b {
            for c in 0..ch {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += cur[[bi, c, i, j]];
                    }
                }
                pooled[[bi, c]] = acc / denom;
            }
        }
        let emb = self.head.forward(&pooled);
        let cache = ForwardCache {
            blocks: blocks_cache,
            stage_raw,
            pooled,
            last_spatial: (h, w),
        };
        (emb, taps, cache)
    }

    /// Embeddings and taps without keeping the cache.
    pub fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, Vec<Array4<f64>>) {
        let (emb, taps, _) = self.forward_full(x);
        (emb, taps)
    }

    pub fn embed(&self, x: &Array4<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Backward pass. `d_emb` is the gradient at the embedding output;
    /// `d_taps`, when present, injects additional gradient at each tap.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_emb: &Array2<f64>,
        d_taps: Option<&[Array4<f64>]>,
    ) -> EncoderGrads {
        let (d_pooled, head_grad) = self.head.backward(&cache.pooled, d_emb);
        let (h, w) = cache.last_spatial;
        let denom = (h * w) as f64;
        let batch = d_pooled.shape()[0];
        let last_ch = d_pooled.shape()[1];
        // un-pool: gradient spreads evenly over spatial positions
        let mut d_tap = Array4::<f64>::zeros((batch, last_ch, h, w));
        for bi in 0..batch {
            for c in 0..last_ch {
                let g = d_pooled[[bi, c]] / denom;
                for i in 0..h {
                    for j in 0..w {
                        d_tap[[bi, c, i, j]] = g;
                    }
                }
            }
        }
        let mut stage_convs: Vec<Vec<ConvGrad>> = Vec::with_capacity(self.stages.len());
        for _ in &self.stages {
            stage_convs.push(Vec::new());
        }
        let mut scale_grads: Vec<Array1<f64>> = self
            .stage_scales
            .iter()
            .map(|s| Array1::zeros(s.len()))
            .collect();
        let mut d_cur = d_tap;
        for si in (0..self.stages.len()).rev() {
            if let Some(dt) = d_taps {
                if si != self.stages.len() - 1 {
                    d_cur = d_cur + &dt[si];
                } else {
                    // last tap gradient is added on top of the pooled path
                    d_cur = d_cur + &dt[si];
                }
            }
            // through channel scaling
            let scales = &self.stage_scales[si];
            let raw = &cache.stage_raw[si];
            for c in 0..scales.len() {
                let mut acc = 0.0;
                let dslice = d_cur.index_axis(Axis(1), c);
                let rslice = raw.index_axis(Axis(1), c);
                ndarray::Zip::from(&dslice).and(&rslice).for_each(|&d, &r| acc += d * r);
                scale_grads[si][c] = acc;
                let s = scales[c];
                if s != 1.0 {
                    d_cur.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * s);
                }
            }
            // through the stage blocks, reverse order
            let mut grads_rev = Vec::new();
            for (block, bcache) in self.stages[si].iter().zip(&cache.blocks[si]).rev() {
                let (dx, mut g) = block_backward(block, bcache, &d_cur);
                grads_rev.append(&mut g);
                d_cur = dx;
            }
            // grads were collected newest(=first block in reverse)-first per
            // block; restore forward block order
            grads_rev.reverse();
            // within-block conv order was reversed too by the append above;
            // block_backward already returns forward-order per block, and we
            // reversed the whole flat list, so re-fix per block below.
            stage_convs[si] = fix_block_order(&self.stages[si], grads_rev);
        }
        EncoderGrads {
            stage_convs,
            head: head_grad,
            scales: scale_grads,
            input: d_cur,
        }
    }

    // -- flat parameter IO ---------------------------------------------------

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for stage in &self.stages {
            for block in stage {
                for c in block.convs() {
                    n += c.param_len();
                }
            }
        }
        n + self.head.param_len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for stage in &self.stages {
            for block in stage {
                for c in block.convs() {
                    out.extend(c.w.iter());
                    out.extend(c.b.iter());
                }
            }
        }
        out.extend(self.head.w.iter());
        out.extend(self.head.b.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter length mismatch");
        let mut pos = 0;
        for stage in &mut self.stages {
            for block in stage {
                for c in block.convs_mut() {
                    for v in c.w.iter_mut() {
                        *v = flat[pos];
                        pos += 1;
                    }
                    for v in c.b.iter_mut() {
                        *v = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
        for v in self.head.w.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
        for v in self.head.b.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
    }

    /// Named parameter groups for the checkpoint container.
    pub fn named_groups(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut groups = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                for (ci, c) in block.convs().iter().enumerate() {
                    groups.push((
                        format!("stage{si}.block{bi}.conv{ci}.w"),
                        c.w.shape().to_vec(),
                        c.w.iter().copied().collect(),
                    ));
                    groups.push((
                        format!("stage{si}.block{bi}.conv{ci}.b"),
                        c.b.shape().to_vec(),
                        c.b.iter().copied().collect(),
                    ));
                }
            }
        }
        groups.push((
            "head.w".into(),
            self.head.w.shape().to_vec(),
            self.head.w.iter().copied().collect(),
        ));
        groups.push((
            "head.b".into(),
            self.head.b.shape().to_vec(),
            self.head.b.iter().copied().collect(),
        ));
        groups
    }

    /// Content hash of parameters plus scales, for purity checks and lineage.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.spec.id.as_bytes());
        for v in self.params_flat() {
            hasher.update(v.to_le_bytes());
        }
        for s in &self.stage_scales {
            for v in s.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let d = hasher.finalize();
        d[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl EncoderGrads {
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for stage in &self.stage_convs {
            for g in stage {
                out.extend(g.dw.iter());
                out.extend(g.db.iter());
            }
        }
        out.extend(self.head.dw.iter());
        out.extend(self.head.db.iter());
        out
    }
}

fn block_forward(block: &Block, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
    match block {
        Block::Conv(conv) => {
            let pre = conv.forward(x);
            let y = relu(&pre);
            (
                y,
                BlockCache::Conv {
                    x: x.clone(),
                    pre,
                },
            )
        }
        Block::Residual { convs, proj } => {
            let mut inputs = Vec::new();
            let mut pres = Vec::new();
            let mut cur = x.clone();
            let n = convs.len();
            for (i, conv) in convs.iter().enumerate() {
                inputs.push(cur.clone());
                let pre = conv.forward(&cur);
                pres.push(pre.clone());
                // relu after every inner conv except the last
                cur = if i + 1 < n { relu(&pre) } else { pre };
            }
            let skip = match proj {
                Some(p) => p.forward(x),
                None => x.clone(),
            };
            let out_pre = cur + skip;
            let y = relu(&out_pre);
            (
                y,
                BlockCache::Residual {
                    x: x.clone(),
                    pres,
                    inputs,
                    out_pre,
                },
            )
        }
    }
}

/// Returns (dx, conv grads in forward order for this block).
fn block_backward(block: &Block, cache: &BlockCache, dy: &Array4<f64>) -> (Array4<f64>, Vec<ConvGrad>) {
    match (block, cache) {
        (Block::Conv(conv), BlockCache::Conv { x, pre }) => {
            let dpre = relu_backward(pre, dy);
            let (dx, g) = conv.backward(x, &dpre);
            (dx, vec![g])
        }
        (
            Block::Residual { convs, proj },
            BlockCache::Residual {
                x,
                pres,
                inputs,
                out_pre,
            },
        ) => {
            let d_out_pre = relu_backward(out_pre, dy);
            let n = convs.len();
            let mut grads_rev = Vec::new();
            let mut d_cur = d_out_pre.clone();
            for i in (0..n).rev() {
                // gradient entering conv i's post-activation
                let d_post = if i + 1 < n {
                    relu_backward(&pres[i], &d_cur)
                } else {
                    d_cur.clone()
                };
                let (dx, g) = convs[i].backward(&inputs[i], &d_post);
                grads_rev.push(g);
                d_cur = dx;
            }
            let mut dx_total = d_cur;
            match proj {
                Some(p) => {
                    let (dskip, gp) = p.backward(x, &d_out_pre);
                    dx_total = dx_total + dskip;
                    grads_rev.reverse();
                    grads_rev.push(gp);
                    return (dx_total, grads_rev);
                }
                None => {
                    dx_total = dx_total + d_out_pre;
                }
            }
            grads_rev.reverse();
            (dx_total, grads_rev)
        }
        _ => unreachable!("cache/block mismatch"),
    }
}

/// `block_backward` returns conv grads in forward order per block; the stage
/// loop collects blocks in reverse, so regroup them into forward block order.
fn fix_block_order(blocks: &[Block], flat_rev_blocks: Vec<ConvGrad>) -> Vec<ConvGrad> {
    // flat_rev_blocks currently holds, after the outer reverse(), grads in
    // the order: block0's grads reversed within? We rebuilt ordering here by
    // sizes: reconstruct by walking blocks forward and pulling the right
    // counts from the front, since the outer loop reversed block order but
    // preserved intra-block forward order within each appended chunk.
    let mut result = Vec::with_capacity(flat_rev_blocks.len());
    let counts: Vec<usize> = blocks.iter().map(|b| b.convs().len()).collect();
    // After the stage loop: chunks were appended block_last..block_first,
    // each chunk internally forward-ordered. Then reversed flat, which makes
    // chunks ordered block_first..block_last but each chunk internally
    // reversed. Undo the intra-chunk reversal.
    let mut iter = flat_rev_blocks.into_iter();
    for count in counts {
        let mut chunk: Vec<ConvGrad> = (&mut iter).take(count).collect();
        chunk.reverse();
        result.append(&mut chunk);
    }
    result
}

/// Validates that two encoders share tap structure (for distillation).
pub fn check_tap_compatibility(a: &Encoder, b: &Encoder) -> Result<()> {
    if a.tap_channels() != b.tap_channels() || a.embedding_dim() != b.embedding_dim() {
        return Err(Error::validation(
            "encoder",
            format!(
                "tap structure mismatch: {:?}/{} vs {:?}/{}",
                a.tap_channels(),
                a.embedding_dim(),
                b.tap_channels(),
                b.embedding_dim()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn forward_emits_one_tap_per_stage() {
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let enc = Encoder::init(&spec, 0);
        let x = Array4::zeros((2, 3, 16, 16));
        let (emb, taps) = enc.forward(&x);
        assert_eq!(taps.len(), 2);
        assert_eq!(emb.shape(), &[2, 32]);
        assert_eq!(taps[0].shape(), &[2, 16, 8, 8]);
        assert_eq!(taps[1].shape(), &[2, 32, 4, 4]);
    }

    #[test]
    fn resnet_specs_construct_and_forward() {
        for id in [ArchId::Rn18, ArchId::Rn34] {
            let spec = ArchSpec::from_id(id);
            let enc = Encoder::init(&spec, 0);
            let x = Array4::zeros((1, 3, 32, 32));
            let (emb, taps) = enc.forward(&x);
            assert_eq!(taps.len(), 4);
            assert_eq!(emb.shape()[1], 512);
        }
    }

    #[test]
    fn params_round_trip() {
        let spec = ArchSpec::micro(&[4, 6], 8);
        let mut enc = Encoder::init(&spec, 3);
        let flat = enc.params_flat();
        assert_eq!(flat.len(), enc.num_params());
        let mut flipped = flat.clone();
        flipped[0] += 1.0;
        enc.set_params_flat(&flipped);
        assert_eq!(enc.params_flat(), flipped);
    }

    #[test]
    fn determinstic_init() {
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let a = Encoder::init(&spec, 9);
        let b = Encoder::init(&spec, 9);
        assert_eq!(a.params_flat(), b.params_flat());
        let c = Encoder::init(&spec, 10);
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn batch_permutation_equivariance() {
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let enc = Encoder::init(&spec, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((3, 3, 16, 16), |_| rng.gen::<f64>());
        let (emb, _) = enc.forward(&x);
        // reverse batch order
        let mut xr = x.clone();
        for b in 0..3 {
            xr.index_axis_mut(Axis(0), b)
                .assign(&x.index_axis(Axis(0), 2 - b));
        }
        let (embr, _) = enc.forward(&xr);
        for b in 0..3 {
            for d in 0..enc.embedding_dim() {
                assert!((emb[[b, d]] - embr[[2 - b, d]]).abs() < 1e-12);
            }
        }
    }

    /// Full-encoder gradient check: scalar objective 0.5*sum(emb^2) plus
    /// 0.5*sum(tap^2), gradients vs central differences over all params.
    #[test]
    fn encoder_backward_matches_finite_differences() {
        let spec = ArchSpec::micro(&[3], 4);
        let mut enc = Encoder::init(&spec, 7);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen::<f64>() * 0.8 + 0.1);
        let objective = |e: &Encoder| -> f64 {
            let (emb, taps) = e.forward(&x);
            let mut v = 0.5 * emb.iter().map(|a| a * a).sum::<f64>();
            for t in &taps {
                v += 0.5 * t.iter().map(|a| a * a).sum::<f64>();
            }
            v
        };
        let (emb, taps, cache) = enc.forward_full(&x);
        let d_taps: Vec<Array4<f64>> = taps.clone();
        let grads = enc.backward(&cache, &emb, Some(&d_taps));
        let flat_grads = grads.params_flat();
        let base_params = enc.params_flat();
        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..base_params.len()).step_by(base_params.len() / 25 + 1) {
            let mut p = base_params.clone();
            p[idx] += h;
            enc.set_params_flat(&p);
            let fp = objective(&enc);
            p[idx] -= 2.0 * h;
            enc.set_params_flat(&p);
            let fm = objective(&enc);
            let num = (fp - fm) / (2.0 * h);
            let ana = flat_grads[idx];
            assert!(
                (num - ana).abs() <= 1e-4 * (1.0 + ana.abs()),
                "param {idx}: {num} vs {ana}"
            );
            checked += 1;
        }
        assert!(checked >= 20);
        enc.set_params_flat(&base_params);
    }

    #[test]
    fn residual_block_backward_matches_finite_differences() {
        let spec = ArchSpec {
            id: "res-test".into(),
            input_channels: 3,
            stages: vec![vec![
                BlockSpec::Conv { out: 4, kernel: 3, stride: 1 },
                BlockSpec::Residual { out: 6, stride: 2, bottleneck: false },
            ]],
            embedding_dim: 5,
        };
        let mut enc = Encoder::init(&spec, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = Array4::from_shape_fn((2, 3, 6, 6), |_| rng.gen::<f64>() * 0.8 + 0.1);
        let objective = |e: &Encoder| -> f64 {
            let (emb, _) = e.forward(&x);
            0.5 * emb.iter().map(|a| a * a).sum::<f64>()
        };
        let (emb, _, cache) = enc.forward_full(&x);
        let grads = enc.backward(&cache, &emb, None);
        let flat_grads = grads.params_flat();
        let base = enc.params_flat();
        let h = 1e-5;
        for idx in (0..base.len()).step_by(base.len() / 20 + 1) {
            let mut p = base.clone();
            p[idx] += h;
            enc.set_params_flat(&p);
            let fp = objective(&enc);
            p[idx] -= 2.0 * h;
            enc.set_params_flat(&p);
            let fm = objective(&enc);
            let num = (fp - fm) / (2.0 * h);
            let ana = flat_grads[idx];
            assert!(
                (num - ana).abs() <= 1e-4 * (1.0 + ana.abs()),
                "param {idx}: {num} vs {ana}"
            );
        }
        enc.set_params_flat(&base);
    }

    #[test]
    fn channel_scale_zero_kills_tap_channel() {
        let spec = ArchSpec::from_id(ArchId::TinyCnn);
        let mut enc = Encoder::init(&spec, 13);
        enc.stage_scales[1][3] = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = Array4::from_shape_fn((2, 3, 16, 16), |_| rng.gen::<f64>());
        let (_, taps) = enc.forward(&x);
        assert!(taps[1].index_axis(Axis(1), 3).iter().all(|&v| v == 0.0));
    }
}

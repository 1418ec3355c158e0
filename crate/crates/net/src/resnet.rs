//! The volumetric residual feature extractor.
//!
//! Canonical 34-layer residual layout with every convolution volumetric:
//! a 7x7x7 stem, four stages of two-conv basic blocks (default 3/4/6/3),
//! global average pooling into the feature vector, and a single
//! fully-connected predictor on top (see [`crate::predictor`]). Weighted
//! layers = 1 stem conv + 2 per block + 1 fc = 34 at the default widths.
//! In-plane downsampling is stride 2 at the stem, the pool, and stages 2-4;
//! the slice axis halves only at stages 2 and 3 so 25-slice cubes survive.
//!
//! Normalization is per-sample (statistics over each channel's spatial
//! extent, affine), so a forward pass never depends on batch composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use cdis_core::DataCube;

use crate::error::{NetError, Result};
use crate::ops::{
    apply_relu_mask, conv3d_backward_input, conv3d_backward_weight, conv3d_forward,
    global_avg_pool, global_avg_pool_backward, maxpool3d_backward, maxpool3d_forward,
    norm_affine_inplace, norm_backward, norm_stats, relu_mask, Triple,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Residual block count per stage.
    pub stage_blocks: [usize; 4],
    /// Channel width of the first stage; later stages double it.
    pub base_width: usize,
    /// Length of the extracted feature vector (must equal 8 * base_width).
    pub feature_dim: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            stage_blocks: [3, 4, 6, 3],
            base_width: 64,
            feature_dim: 512,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// The small config used by gradient checks and desk-scale runs.
    pub fn miniature(in_channels: usize, seed: u64) -> Self {
        NetworkConfig {
            in_channels,
            stage_blocks: [1, 1, 1, 1],
            base_width: 4,
            feature_dim: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(NetError::InvalidConfig("in_channels must be >= 1".into()));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(NetError::InvalidConfig(format!(
                "every stage needs >= 1 block, got {:?}",
                self.stage_blocks
            )));
        }
        if self.base_width == 0 {
            return Err(NetError::InvalidConfig("base_width must be >= 1".into()));
        }
        if self.feature_dim != 8 * self.base_width {
            return Err(NetError::InvalidConfig(format!(
                "feature_dim must be 8 * base_width ({} with base_width {}), got {}",
                8 * self.base_width,
                self.base_width,
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Weighted layers: the stem conv, two convs per block, and the final
    /// fully-connected predictor (shortcut projections are not counted, per
    /// the usual residual-network accounting).
    pub fn weighted_layers(&self) -> usize {
        1 + 2 * self.stage_blocks.iter().sum::<usize>() + 1
    }
}

const STEM_KERNEL: Triple = (7, 7, 7);
const STEM_STRIDE: Triple = (1, 2, 2);
const STEM_PAD: Triple = (3, 3, 3);
const POOL_KERNEL: Triple = (3, 3, 3);
const POOL_STRIDE: Triple = (1, 2, 2);
const POOL_PAD: Triple = (1, 1, 1);

/// Per-stage first-block stride: in-plane everywhere after stage 1, slice
/// axis only at stages 2 and 3.
const STAGE_STRIDES: [Triple; 4] = [(1, 1, 1), (2, 2, 2), (2, 2, 2), (1, 2, 2)];

/// conv + per-sample norm (+ optional fused ReLU).
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: Tensor,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    stride: Triple,
    pad: Triple,
    relu: bool,
}

#[derive(Debug)]
struct ConvUnitCache {
    input: Tensor,
    pre_norm: Tensor,
    stats: (f64, f64),
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvUnitGrads {
    weight: Tensor,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl ConvUnit {
    fn new(
        rng: &mut ChaCha12Rng,
        in_c: usize,
        out_c: usize,
        kernel: Triple,
        stride: Triple,
        pad: Triple,
        relu: bool,
    ) -> Self {
        let fan_in = (in_c * kernel.0 * kernel.1 * kernel.2) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = out_c * in_c * kernel.0 * kernel.1 * kernel.2;
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ConvUnit {
            weight: Tensor::from_vec(&[out_c, in_c, kernel.0, kernel.1, kernel.2], data),
            gamma: vec![1.0; out_c],
            beta: vec![0.0; out_c],
            stride,
            pad,
            relu,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = conv3d_forward(x, &self.weight, self.stride, self.pad);
        let stats = norm_stats(&y);
        norm_affine_inplace(&mut y, stats, &self.gamma, &self.beta, self.relu);
        y
    }

    fn forward_train(&self, x: &Tensor) -> (Tensor, ConvUnitCache) {
        let pre_norm = conv3d_forward(x, &self.weight, self.stride, self.pad);
        let stats = norm_stats(&pre_norm);
        let mut y = pre_norm.clone();
        norm_affine_inplace(&mut y, stats, &self.gamma, &self.beta, self.relu);
        let mask = if self.relu { relu_mask(&y) } else { Vec::new() };
        (
            y,
            ConvUnitCache {
                input: x.clone(),
                pre_norm,
                stats,
                mask,
            },
        )
    }

    fn backward(&self, cache: &ConvUnitCache, mut gout: Tensor, g: &mut ConvUnitGrads) -> Tensor {
        if self.relu {
            apply_relu_mask(&mut gout, &cache.mask);
        }
        let gconv = norm_backward(
            &cache.pre_norm,
            cache.stats,
            &self.gamma,
            &gout,
            &mut g.gamma,
            &mut g.beta,
        );
        let gw = conv3d_backward_weight(
            &cache.input,
            &gconv,
            self.weight.dims(),
            self.stride,
            self.pad,
        );
        g.weight.add_assign(&gw);
        conv3d_backward_input(&self.weight, &gconv, cache.input.dims(), self.stride, self.pad)
    }

    fn zero_grads(&self) -> ConvUnitGrads {
        ConvUnitGrads {
            weight: Tensor::zeros(self.weight.dims()),
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        f(&format!("{prefix}.conv"), self.weight.data());
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.conv"), self.weight.data_mut());
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl ConvUnitGrads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(self.weight.data());
        f(&self.gamma);
        f(&self.beta);
    }

    fn axpy(&mut self, other: &ConvUnitGrads, scale: f64) {
        self.weight.axpy(&other.weight, scale);
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            *a += scale * b;
        }
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    unit1: ConvUnit,
    unit2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Debug)]
pub(crate) struct BlockCache {
    c1: ConvUnitCache,
    c2: ConvUnitCache,
    cs: Option<ConvUnitCache>,
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockGrads {
    unit1: ConvUnitGrads,
    unit2: ConvUnitGrads,
    shortcut: Option<ConvUnitGrads>,
}

impl BasicBlock {
    fn new(rng: &mut ChaCha12Rng, in_c: usize, out_c: usize, stride: Triple) -> Self {
        let unit1 = ConvUnit::new(rng, in_c, out_c, (3, 3, 3), stride, (1, 1, 1), true);
        let unit2 = ConvUnit::new(rng, out_c, out_c, (3, 3, 3), (1, 1, 1), (1, 1, 1), false);
        let shortcut = if stride != (1, 1, 1) || in_c != out_c {
            Some(ConvUnit::new(rng, in_c, out_c, (1, 1, 1), stride, (0, 0, 0), false))
        } else {
            None
        };
        BasicBlock {
            unit1,
            unit2,
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let a = self.unit1.forward(x);
        let mut m = self.unit2.forward(&a);
        drop(a);
        match &self.shortcut {
            Some(u) => m.add_assign(&u.forward(x)),
            None => m.add_assign(x),
        }
        // Final ReLU of the block.
        for v in m.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        m
    }

    fn forward_train(&self, x: &Tensor) -> (Tensor, BlockCache) {
        let (a, c1) = self.unit1.forward_train(x);
        let (mut m, c2) = self.unit2.forward_train(&a);
        let cs = match &self.shortcut {
            Some(u) => {
                let (s, cs) = u.forward_train(x);
                m.add_assign(&s);
                Some(cs)
            }
            None => {
                m.add_assign(x);
                None
            }
        };
        for v in m.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mask = relu_mask(&m);
        (m, BlockCache { c1, c2, cs, mask })
    }

    fn backward(&self, cache: &BlockCache, mut gout: Tensor, g: &mut BlockGrads) -> Tensor {
        apply_relu_mask(&mut gout, &cache.mask);
        let g_mid = self.unit2.backward(&cache.c2, gout.clone(), &mut g.unit2);
        let mut gx = self.unit1.backward(&cache.c1, g_mid, &mut g.unit1);
        match (&self.shortcut, &cache.cs) {
            (Some(u), Some(cs)) => {
                let gs = u.backward(cs, gout, g.shortcut.as_mut().expect("shortcut grads"));
                gx.add_assign(&gs);
            }
            (None, None) => gx.add_assign(&gout),
            _ => unreachable!("shortcut cache mismatch"),
        }
        gx
    }

    fn zero_grads(&self) -> BlockGrads {
        BlockGrads {
            unit1: self.unit1.zero_grads(),
            unit2: self.unit2.zero_grads(),
            shortcut: self.shortcut.as_ref().map(|u| u.zero_grads()),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.unit1.visit(&format!("{prefix}.u1"), f);
        self.unit2.visit(&format!("{prefix}.u2"), f);
        if let Some(u) = &self.shortcut {
            u.visit(&format!("{prefix}.short"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.unit1.visit_mut(&format!("{prefix}.u1"), f);
        self.unit2.visit_mut(&format!("{prefix}.u2"), f);
        if let Some(u) = &mut self.shortcut {
            u.visit_mut(&format!("{prefix}.short"), f);
        }
    }
}

impl BlockGrads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.unit1.visit(f);
        self.unit2.visit(f);
        if let Some(u) = &self.shortcut {
            u.visit(f);
        }
    }

    fn axpy(&mut self, other: &BlockGrads, scale: f64) {
        self.unit1.axpy(&other.unit1, scale);
        self.unit2.axpy(&other.unit2, scale);
        if let (Some(a), Some(b)) = (self.shortcut.as_mut(), other.shortcut.as_ref()) {
            a.axpy(b, scale);
        }
    }
}

/// The feature extractor: stem, pool, residual stages, global average pool.
#[derive(Debug, Clone)]
pub struct Extractor {
    cfg: NetworkConfig,
    stem: ConvUnit,
    stages: Vec<Vec<BasicBlock>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ExtractorTape {
    stem: ConvUnitCache,
    pool_argmax: Vec<u32>,
    pool_in_dims: Vec<usize>,
    blocks: Vec<BlockCache>,
    gap_in_dims: Vec<usize>,
}

/// Parameter gradients mirroring the extractor structure.
#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    stem: ConvUnitGrads,
    blocks: Vec<BlockGrads>,
}

impl ExtractorGrads {
    /// Visits gradient slices in the same order as
    /// [`Extractor::visit_params`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, other: &ExtractorGrads, scale: f64) {
        self.stem.axpy(&other.stem, scale);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(b, scale);
        }
    }
}

impl Extractor {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let stem = ConvUnit::new(
            &mut rng,
            cfg.in_channels,
            cfg.base_width,
            STEM_KERNEL,
            STEM_STRIDE,
            STEM_PAD,
            true,
        );
        let mut stages = Vec::with_capacity(4);
        let mut in_c = cfg.base_width;
        for (s, &n_blocks) in cfg.stage_blocks.iter().enumerate() {
            let out_c = cfg.base_width << s;
            let mut blocks = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { (1, 1, 1) };
                blocks.push(BasicBlock::new(&mut rng, in_c, out_c, stride));
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Ok(Extractor { cfg, stem, stages })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Inference pass over a `[channels, depth, height, width]` tensor.
    pub fn forward(&self, x: &Tensor) -> Vec<f64> {
        assert_eq!(x.dims()[0], self.cfg.in_channels, "input channel mismatch");
        let t = self.stem.forward(x);
        let (mut t, _) = maxpool3d_forward(&t, POOL_KERNEL, POOL_STRIDE, POOL_PAD);
        for stage in &self.stages {
            for block in stage {
                t = block.forward(&t);
            }
        }
        global_avg_pool(&t)
    }

    /// Training pass; the tape feeds [`Extractor::backward`].
    pub fn forward_train(&self, x: &Tensor) -> (Vec<f64>, ExtractorTape) {
        let (t, stem_cache) = self.stem.forward_train(x);
        let pool_in_dims = t.dims().to_vec();
        let (mut t, pool_argmax) = maxpool3d_forward(&t, POOL_KERNEL, POOL_STRIDE, POOL_PAD);
        let mut blocks = Vec::new();
        for stage in &self.stages {
            for block in stage {
                let (next, cache) = block.forward_train(&t);
                blocks.push(cache);
                t = next;
            }
        }
        let gap_in_dims = t.dims().to_vec();
        let features = global_avg_pool(&t);
        (
            features,
            ExtractorTape {
                stem: stem_cache,
                pool_argmax,
                pool_in_dims,
                blocks,
                gap_in_dims,
            },
        )
    }

    /// Accumulates gradients for one sample into `grads`.
    pub fn backward(&self, tape: &ExtractorTape, gfeat: &[f64], grads: &mut ExtractorGrads) {
        let mut g = global_avg_pool_backward(gfeat, &tape.gap_in_dims);
        let mut cache_iter = tape.blocks.iter().rev();
        let mut grad_iter_idx = tape.blocks.len();
        for stage in self.stages.iter().rev() {
            for block in stage.iter().rev() {
                grad_iter_idx -= 1;
                let cache = cache_iter.next().expect("one cache per block");
                g = block.backward(cache, g, &mut grads.blocks[grad_iter_idx]);
            }
        }
        let g = maxpool3d_backward(&g, &tape.pool_argmax, &tape.pool_in_dims);
        let _ = self.stem.backward(&tape.stem, g, &mut grads.stem);
    }

    pub fn zero_grads(&self) -> ExtractorGrads {
        ExtractorGrads {
            stem: self.stem.zero_grads(),
            blocks: self
                .stages
                .iter()
                .flat_map(|s| s.iter().map(|b| b.zero_grads()))
                .collect(),
        }
    }

    /// Visits every parameter slice with a stable name, in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.stem.visit("stem", f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&format!("s{s}.b{b}"), f);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.stem.visit_mut("stem", f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("s{s}.b{b}"), f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, s| n += s.len());
        n
    }
}

/// Builds the feature tensor from a cube (zero-copy layout match).
pub fn tensor_from_cube(cube: &DataCube) -> Tensor {
    let (h, w, d) = cube.dims();
    Tensor::from_vec(&[cube.channels(), d, h, w], cube.data().to_vec())
}

/// Validated feature extraction from a standardized cube.
pub fn extract_features(extractor: &Extractor, cube: &DataCube) -> Result<Vec<f64>> {
    if cube.channels() != extractor.cfg.in_channels {
        return Err(NetError::ChannelMismatch {
            expected: extractor.cfg.in_channels,
            got: cube.channels(),
        });
    }
    let features = extractor.forward(&tensor_from_cube(cube));
    if features.iter().any(|v| !v.is_finite()) {
        return Err(NetError::ShapeMismatch(
            "extractor produced non-finite features".into(),
        ));
    }
    Ok(features)
}

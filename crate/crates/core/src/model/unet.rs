//! Configurable U-Net.
//!
//! Encoder level `l` (`0..depth`) runs two 3x3 conv+ReLU layers with
//! `min(base * 2^l, 1024)` channels and downsamples. A conv pair forms the
//! bottleneck. Each decoder level upsamples (nearest neighbor), applies a
//! conv+ReLU, concatenates the encoder features of that level (skipped at
//! level 0 when `top_skip` is off) and runs another conv pair. A linear 1x1
//! conv maps to one channel; with `residual` on, the input is added.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvCache, PoolCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_CHANNELS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Max,
    MaxBlur,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_features: usize,
    pub residual: bool,
    pub top_skip: bool,
    pub pooling: PoolingKind,
    pub conv_kernel: usize,
}

impl ModelConfig {
    /// Residual U-Net with every skip connection and plain max pooling.
    pub fn n2v(depth: usize, base_features: usize) -> Self {
        Self {
            depth,
            base_features,
            residual: true,
            top_skip: true,
            pooling: PoolingKind::Max,
            conv_kernel: 3,
        }
    }

    /// No residual, no top-most skip, max-blur pooling.
    pub fn n2v2(depth: usize, base_features: usize) -> Self {
        Self {
            residual: false,
            top_skip: false,
            pooling: PoolingKind::MaxBlur,
            ..Self::n2v(depth, base_features)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("model.depth", "must be >= 1"));
        }
        if self.base_features < 1 {
            return Err(Error::config("model.base_features", "must be >= 1"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("model.conv_kernel", "must be odd"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_features << level.min(20)).min(MAX_CHANNELS)
    }

    /// Spatial sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Upper bound on how far (in input pixels) an output pixel can be
    /// influenced by the input.
    pub fn receptive_radius(&self) -> usize {
        let half = self.conv_kernel / 2;
        let pool_growth = match self.pooling {
            PoolingKind::Max => 1,
            PoolingKind::MaxBlur => 2,
        };
        let mut scale = 1;
        let mut r = 0;
        for _ in 0..self.depth {
            r += 2 * half * scale;
            r += pool_growth * scale;
            scale *= 2;
        }
        r += 2 * half * scale;
        for _ in 0..self.depth {
            // nearest upsampling may reach the neighboring coarse pixel
            r += scale;
            scale /= 2;
            r += 3 * half * scale;
        }
        r
    }
}

/// Named, shaped parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    convs: [Conv; 2],
    skip: bool,
}

/// Gradient buffers aligned with [`UNet::params`].
pub type Grads = Vec<Vec<f32>>;

enum Cached {
    Conv(ConvCache),
    Pool(PoolCache),
}

/// Activations recorded by [`UNet::forward_train`].
pub struct Tape {
    stack: Vec<Cached>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
    params: Vec<Param>,
    encoders: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    decoders: Vec<DecoderLevel>,
    head: Conv,
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            data: vec![0.0; cout * cin * k * k],
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            shape: vec![cout],
            data: vec![0.0; cout],
        });
        Conv {
            weight,
            bias: weight + 1,
            cin,
            cout,
            k,
        }
    }
}

impl UNet {
    /// Builds the layer graph with all parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.conv_kernel;
        let mut b = Builder { params: Vec::new() };
        let mut encoders = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for level in 0..config.depth {
            let c = config.channels(level);
            encoders.push([
                b.conv(&format!("enc{level}.conv0"), cin, c, k),
                b.conv(&format!("enc{level}.conv1"), c, c, k),
            ]);
            cin = c;
        }
        let cb = config.channels(config.depth);
        let bottleneck = [
            b.conv("bottleneck.conv0", cin, cb, k),
            b.conv("bottleneck.conv1", cb, cb, k),
        ];
        let mut decoders: Vec<Option<DecoderLevel>> = vec![None; config.depth];
        let mut below = cb;
        for level in (0..config.depth).rev() {
            let c = config.channels(level);
            let skip = level > 0 || config.top_skip;
            let up = b.conv(&format!("dec{level}.up"), below, c, k);
            let merged = if skip { 2 * c } else { c };
            let convs = [
                b.conv(&format!("dec{level}.conv0"), merged, c, k),
                b.conv(&format!("dec{level}.conv1"), c, c, k),
            ];
            decoders[level] = Some(DecoderLevel { up, convs, skip });
            below = c;
        }
        let head = b.conv("head", config.channels(0), 1, 1);
        Ok(Self {
            config,
            params: b.params,
            encoders,
            bottleneck,
            decoders: decoders.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    /// Kaiming-normal weights (fan-in, ReLU gain; unit gain for the linear
    /// head), zero biases. Each tensor draws from its own seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let head_weight = net.head.weight;
        for (i, p) in net.params.iter_mut().enumerate() {
            if p.shape.len() != 4 {
                continue;
            }
            let fan_in = (p.shape[1] * p.shape[2] * p.shape[3]) as f64;
            let gain = if i == head_weight { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            let mut rng = rng::derived_rng(seed, &p.name);
            p.data
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng) as f32);
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, params: Vec<Param>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors, expected {}",
                params.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&params) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name, theirs.shape, mine.name, mine.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        self.params
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect()
    }

    /// Input channel count of the given decoder level's merge convolution.
    pub fn decoder_merge_channels(&self, level: usize) -> usize {
        self.decoders[level].convs[0].cin
    }

    pub fn has_skip(&self, level: usize) -> bool {
        self.decoders[level].skip
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.size_multiple();
        if x.channels != 1 {
            return Err(Error::shape(format!(
                "{} input channels, expected 1",
                x.channels
            )));
        }
        if !x.height.is_multiple_of(m)
            || !x.width.is_multiple_of(m)
            || x.height == 0
            || x.width == 0
        {
            return Err(Error::shape(format!(
                "{}x{} input is not divisible by {m} (2^depth)",
                x.height, x.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x, None))
    }

    /// Forward pass that records what [`UNet::backward`] needs.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape { stack: Vec::new() };
        let out = self.run(x, Some(&mut tape));
        Ok((out, tape))
    }

    fn conv(&self, conv: &Conv, x: &Tensor, relu: bool, tape: &mut Option<&mut Tape>) -> Tensor {
        debug_assert_eq!(x.channels, conv.cin);
        let (out, cache) = ops::conv_forward(
            x,
            &self.params[conv.weight].data,
            &self.params[conv.bias].data,
            conv.cout,
            conv.k,
            relu,
            tape.is_some(),
        );
        if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
            t.stack.push(Cached::Conv(c));
        }
        out
    }

    fn pool(&self, x: &Tensor, tape: &mut Option<&mut Tape>) -> Tensor {
        let keep = tape.is_some();
        let (out, cache) = match self.config.pooling {
            PoolingKind::Max => ops::max_pool(x, keep),
            PoolingKind::MaxBlur => ops::max_blur_pool(x, keep),
        };
        if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
            t.stack.push(Cached::Pool(c));
        }
        out
    }

    fn run(&self, x: &Tensor, mut tape: Option<&mut Tape>) -> Tensor {
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        for enc in &self.encoders {
            h = self.conv(&enc[0], &h, true, &mut tape);
            h = self.conv(&enc[1], &h, true, &mut tape);
            let pooled = self.pool(&h, &mut tape);
            skips.push(h);
            h = pooled;
        }
        h = self.conv(&self.bottleneck[0], &h, true, &mut tape);
        h = self.conv(&self.bottleneck[1], &h, true, &mut tape);
        for (level, dec) in self.decoders.iter().enumerate().rev() {
            h = ops::upsample2(&h);
            h = self.conv(&dec.up, &h, true, &mut tape);
            if dec.skip {
                h = h.concat_channels(&skips[level]);
            }
            h = self.conv(&dec.convs[0], &h, true, &mut tape);
            h = self.conv(&dec.convs[1], &h, true, &mut tape);
        }
        let mut out = self.conv(&self.head, &h, false, &mut tape);
        if self.config.residual {
            out.add_assign(x);
        }
        out
    }

    fn conv_back(
        &self,
        conv: &Conv,
        grad: Tensor,
        tape: &mut Tape,
        grads: &mut Grads,
        need_input: bool,
    ) -> Option<Tensor> {
        let Some(Cached::Conv(cache)) = tape.stack.pop() else {
            panic!("tape out of sync: expected a convolution");
        };
        let (dw, db) = two_mut(grads, conv.weight, conv.bias);
        ops::conv_backward(
            grad,
            cache,
            &self.params[conv.weight].data,
            conv.k,
            dw,
            db,
            need_input,
        )
    }

    fn pool_back(&self, grad: &Tensor, tape: &mut Tape) -> Tensor {
        let Some(Cached::Pool(cache)) = tape.stack.pop() else {
            panic!("tape out of sync: expected a pooling layer");
        };
        match self.config.pooling {
            PoolingKind::Max => ops::max_pool_backward(grad, cache),
            PoolingKind::MaxBlur => ops::max_blur_pool_backward(grad, cache),
        }
    }

    /// Accumulates into `grads` the parameter gradients for the output
    /// gradient `grad_out`. Consumes the tape.
    pub fn backward(&self, mut tape: Tape, grad_out: Tensor, grads: &mut Grads) {
        // The residual path carries no parameters.
        let mut g = self
            .conv_back(&self.head, grad_out, &mut tape, grads, true)
            .unwrap();
        let mut skip_grads: Vec<Option<Tensor>> = (0..self.config.depth).map(|_| None).collect();
        for (level, dec) in self.decoders.iter().enumerate() {
            g = self
                .conv_back(&dec.convs[1], g, &mut tape, grads, true)
                .unwrap();
            g = self
                .conv_back(&dec.convs[0], g, &mut tape, grads, true)
                .unwrap();
            if dec.skip {
                let (up, skip) = g.split_channels(dec.up.cout);
                skip_grads[level] = Some(skip);
                g = up;
            }
            g = self.conv_back(&dec.up, g, &mut tape, grads, true).unwrap();
            g = ops::upsample2_backward(&g);
        }
        g = self
            .conv_back(&self.bottleneck[1], g, &mut tape, grads, true)
            .unwrap();
        g = self
            .conv_back(&self.bottleneck[0], g, &mut tape, grads, true)
            .unwrap();
        for (level, enc) in self.encoders.iter().enumerate().rev() {
            g = self.pool_back(&g, &mut tape);
            if let Some(s) = skip_grads[level].take() {
                g.add_assign(&s);
            }
            g = self.conv_back(&enc[1], g, &mut tape, grads, true).unwrap();
            match self.conv_back(&enc[0], g, &mut tape, grads, level > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
        debug_assert!(tape.stack.is_empty());
    }
}

fn two_mut(v: &mut [Vec<f32>], a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_data(
            1,
            n,
            h,
            w,
            (0..n * h * w)
                .map(|i| ((i * 29 % 53) as f32 - 26.0) / 13.0)
                .collect(),
        )
    }

    #[test]
    fn presets_and_structure() {
        let n2v = ModelConfig::n2v(2, 96);
        assert!(n2v.residual && n2v.top_skip && n2v.pooling == PoolingKind::Max);
        let n2v2 = ModelConfig::n2v2(3, 64);
        assert!(!n2v2.residual && !n2v2.top_skip && n2v2.pooling == PoolingKind::MaxBlur);

        let with_skip = UNet::zeros(ModelConfig::n2v(2, 8)).unwrap();
        let without = UNet::zeros(ModelConfig::n2v2(2, 8)).unwrap();
        assert_eq!(with_skip.decoder_merge_channels(0), 16);
        assert_eq!(without.decoder_merge_channels(0), 8);
        assert_eq!(without.decoder_merge_channels(1), 32);
        assert!(!without.has_skip(0) && without.has_skip(1));
        assert_eq!(ModelConfig::n2v(3, 512).channels(3), 1024);
        assert!(ModelConfig::n2v(0, 8).validate().is_err());
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [
            ModelConfig::n2v(1, 2),
            ModelConfig::n2v2(2, 4),
            ModelConfig::n2v(3, 2),
        ] {
            let net = UNet::new(cfg, 1).unwrap();
            let x = input(2, 16, 24);
            let y = net.forward(&x).unwrap();
            assert_eq!(y.dims(), x.dims());
        }
        let net = UNet::new(ModelConfig::n2v(2, 2), 1).unwrap();
        assert!(net.forward(&input(1, 12, 10)).is_err());
    }

    #[test]
    fn zero_weights_with_residual_is_identity() {
        let net = UNet::zeros(ModelConfig::n2v(2, 4)).unwrap();
        let x = input(2, 8, 8);
        assert_eq!(net.forward(&x).unwrap(), x);
        let mut net = UNet::new(ModelConfig::n2v(2, 4), 3).unwrap();
        let head = net.head;
        net.params_mut()[head.weight]
            .data
            .iter_mut()
            .for_each(|w| *w = 0.0);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn initialization_is_seeded() {
        let a = UNet::new(ModelConfig::n2v2(2, 4), 5).unwrap();
        let b = UNet::new(ModelConfig::n2v2(2, 4), 5).unwrap();
        let c = UNet::new(ModelConfig::n2v2(2, 4), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn receptive_radius_bounds_influence() {
        for cfg in [ModelConfig::n2v(2, 2), ModelConfig::n2v2(2, 2)] {
            let net = UNet::new(cfg, 2).unwrap();
            let x = input(1, 96, 96);
            let base = net.forward(&x).unwrap();
            let mut poked = x.clone();
            poked.data[48 * 96 + 48] += 10.0;
            let out = net.forward(&poked).unwrap();
            let r = cfg.receptive_radius() as isize;
            for y in 0..96isize {
                for xx in 0..96isize {
                    let i = (y * 96 + xx) as usize;
                    if (y - 48).abs() > r || (xx - 48).abs() > r {
                        assert_eq!(
                            out.data[i], base.data[i],
                            "pixel ({y}, {xx}) beyond radius {r}"
                        );
                    }
                }
            }
        }
    }
}

//! Sub-patch encoders mapping each grayscale block to a `d`-dimensional
//! embedding by spatial mean pooling over the last feature map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::geometry::{Cell, SubpatchBlocks};
use crate::nn::{
    join, mean_pool, mean_pool_backward, BatchNorm2d, Conv2d, MaxPool2d, Param, Relu, Stateful,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    /// Pre-activation ResNet-18 truncated after its third stage (256 channels).
    #[serde(rename = "resnet18v2-block3")]
    ResNet18V2Block3,
    /// Four stride-2 3x3 convolutions of widths (32, 64, 128, d).
    #[serde(rename = "small-cnn")]
    SmallCnn,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::ResNet18V2Block3 => "resnet18v2-block3",
            Backbone::SmallCnn => "small-cnn",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = CpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18v2-block3" => Ok(Backbone::ResNet18V2Block3),
            "small-cnn" => Ok(Backbone::SmallCnn),
            other => Err(CpcError::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

pub const RESNET_BLOCK3_WIDTH: usize = 256;
const SMALL_CNN_WIDTHS: [usize; 3] = [32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub embedding_dim: usize,
    pub input_side: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(CpcError::Config(format!(
                "embedding_dim must be at least 8, got {}",
                self.embedding_dim
            )));
        }
        if self.input_side < 4 {
            return Err(CpcError::Config(format!(
                "encoder input_side {} is too small",
                self.input_side
            )));
        }
        if self.backbone == Backbone::ResNet18V2Block3 && self.embedding_dim != RESNET_BLOCK3_WIDTH {
            return Err(CpcError::Config(format!(
                "resnet18v2-block3 produces {RESNET_BLOCK3_WIDTH}-d embeddings, config asks for {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }
}

/// One embedding per extracted block, indexed like [`SubpatchBlocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub patches_per_axis: usize,
    pub subpatches_per_patch_axis: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, patch: Cell, local: Cell) -> usize {
        let s = self.subpatches_per_patch_axis;
        (patch.0 * self.patches_per_axis + patch.1) * s * s + local.0 * s + local.1
    }

    pub fn vector(&self, patch: Cell, local: Cell) -> &[f32] {
        self.row(self.index(patch, local))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Maps raw `[0, 1]` intensities to the network's `[-1, 1]` input range.
fn blocks_to_tensor(data: &[f32], side: usize) -> Tensor {
    let n = data.len() / (side * side);
    Tensor::from_vec(n, side, side, 1, data.iter().map(|v| v * 2.0 - 1.0).collect())
}

#[derive(Debug, Clone)]
pub struct SmallCnn {
    convs: Vec<Conv2d>,
    relus: Vec<Relu>,
}

impl SmallCnn {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = [1, SMALL_CNN_WIDTHS[0], SMALL_CNN_WIDTHS[1], SMALL_CNN_WIDTHS[2], dim];
        let mut convs: Vec<Conv2d> = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, true, rng))
            .collect();
        convs[0].input_grad = false;
        Self {
            convs,
            relus: vec![Relu::default(); 4],
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for conv in &self.convs {
            h = Relu::infer(&conv.infer(&h));
        }
        h
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (conv, relu) in self.convs.iter_mut().zip(self.relus.iter_mut()) {
            h = relu.forward(&conv.forward(&h));
        }
        h
    }

    fn backward(&mut self, dy: Tensor) {
        let mut g = dy;
        for (conv, relu) in self.convs.iter_mut().zip(self.relus.iter_mut()).rev() {
            match conv.backward(&relu.backward(&g)) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }
}

impl Stateful for SmallCnn {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&join(prefix, &format!("conv{}", i + 1)), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.collect_mut(&join(prefix, &format!("conv{}", i + 1)), out);
        }
    }
}

/// Pre-activation basic block: `conv(relu(bn(conv(relu(bn(x)))))) + shortcut`.
#[derive(Debug, Clone)]
struct PreActBlock {
    bn1: BatchNorm2d,
    relu1: Relu,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv2: Conv2d,
    projection: Option<Conv2d>,
}

impl PreActBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let projection =
            (stride != 1 || cin != cout).then(|| Conv2d::new(cin, cout, 1, stride, 0, false, rng));
        Self {
            bn1: BatchNorm2d::new(cin),
            relu1: Relu::default(),
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            relu2: Relu::default(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            projection,
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let a = Relu::infer(&self.bn1.infer(x));
        let mut h = self.conv1.infer(&a);
        h = self.conv2.infer(&Relu::infer(&self.bn2.infer(&h)));
        match &self.projection {
            Some(p) => h.add_assign(&p.infer(&a)),
            None => h.add_assign(x),
        }
        h
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let a = self.relu1.forward(&self.bn1.forward(x));
        let h = self.conv1.forward(&a);
        let h = self.relu2.forward(&self.bn2.forward(&h));
        let mut h = self.conv2.forward(&h);
        match &mut self.projection {
            Some(p) => h.add_assign(&p.forward(&a)),
            None => h.add_assign(x),
        }
        h
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dh = self.conv2.backward(dy).expect("input grad");
        let dh = self.bn2.backward(&self.relu2.backward(&dh));
        let mut da = self.conv1.backward(&dh).expect("input grad");
        if let Some(p) = &mut self.projection {
            da.add_assign(&p.backward(dy).expect("input grad"));
        }
        let mut dx = self.bn1.backward(&self.relu1.backward(&da));
        if self.projection.is_none() {
            dx.add_assign(dy);
        }
        dx
    }
}

impl Stateful for PreActBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.bn1.collect(&join(prefix, "bn1"), out);
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.bn2.collect(&join(prefix, "bn2"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        if let Some(p) = &self.projection {
            p.collect(&join(prefix, "shortcut"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.bn1.collect_mut(&join(prefix, "bn1"), out);
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.bn2.collect_mut(&join(prefix, "bn2"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
        if let Some(p) = &mut self.projection {
            p.collect_mut(&join(prefix, "shortcut"), out);
        }
    }
}

/// ResNet-18 v2 up to and including the third stage, followed by the
/// pre-activation network's closing BN + ReLU.
#[derive(Debug, Clone)]
pub struct ResNetBlock3 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    pool: MaxPool2d,
    blocks: Vec<PreActBlock>,
    final_bn: BatchNorm2d,
    final_relu: Relu,
}

impl ResNetBlock3 {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut stem_conv = Conv2d::new(1, 64, 7, 2, 3, false, rng);
        stem_conv.input_grad = false;
        let plan = [(64, 64, 1), (64, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1)];
        let blocks = plan
            .iter()
            .map(|&(cin, cout, stride)| PreActBlock::new(cin, cout, stride, rng))
            .collect();
        Self {
            stem_conv,
            stem_bn: BatchNorm2d::new(64),
            stem_relu: Relu::default(),
            pool: MaxPool2d::new(3, 2, 1),
            blocks,
            final_bn: BatchNorm2d::new(RESNET_BLOCK3_WIDTH),
            final_relu: Relu::default(),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.pool.infer(&Relu::infer(&self.stem_bn.infer(&self.stem_conv.infer(x))));
        for b in &self.blocks {
            h = b.infer(&h);
        }
        Relu::infer(&self.final_bn.infer(&h))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.stem_conv.forward(x);
        let h = self.stem_relu.forward(&self.stem_bn.forward(&h));
        let mut h = self.pool.forward(&h);
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        self.final_relu.forward(&self.final_bn.forward(&h))
    }

    fn backward(&mut self, dy: Tensor) {
        let mut g = self.final_bn.backward(&self.final_relu.backward(&dy));
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self.pool.backward(&g);
        let g = self.stem_bn.backward(&self.stem_relu.backward(&g));
        self.stem_conv.backward(&g);
    }
}

impl Stateful for ResNetBlock3 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.stem_conv.collect(&join(prefix, "stem.conv"), out);
        self.stem_bn.collect(&join(prefix, "stem.bn"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("layer{}.{}", i / 2 + 1, i % 2)), out);
        }
        self.final_bn.collect(&join(prefix, "final_bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.stem_conv.collect_mut(&join(prefix, "stem.conv"), out);
        self.stem_bn.collect_mut(&join(prefix, "stem.bn"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("layer{}.{}", i / 2 + 1, i % 2)), out);
        }
        self.final_bn.collect_mut(&join(prefix, "final_bn"), out);
    }
}

#[derive(Debug, Clone)]
enum Network {
    Small(SmallCnn),
    ResNet(Box<ResNetBlock3>),
}

/// Encoder state: configuration plus weights. Built only from a seed; there is
/// no code path that imports externally trained weights other than this
/// crate's own checkpoints.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    net: Network,
    /// Feature-map shape of the last training forward pass.
    pending: Option<[usize; 4]>,
}

pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match config.backbone {
        Backbone::SmallCnn => Network::Small(SmallCnn::new(config.embedding_dim, &mut rng)),
        Backbone::ResNet18V2Block3 => Network::ResNet(Box::new(ResNetBlock3::new(&mut rng))),
    };
    Ok(Encoder {
        config,
        net,
        pending: None,
    })
}

/// Maximum number of blocks pushed through the network at once in inference.
const INFER_CHUNK: usize = 512;

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn check_blocks(&self, data: &[f32], side: usize) -> Result<()> {
        if side != self.config.input_side {
            return Err(CpcError::Shape(format!(
                "blocks are {side}x{side} but the encoder expects {}x{}",
                self.config.input_side, self.config.input_side
            )));
        }
        if !data.len().is_multiple_of(side * side) {
            return Err(CpcError::Shape("block buffer is not a whole number of blocks".into()));
        }
        Ok(())
    }

    /// Inference-mode embeddings of `side`x`side` blocks stored back to back.
    pub fn embed(&self, data: &[f32], side: usize) -> Result<Vec<f32>> {
        self.check_blocks(data, side)?;
        let block = side * side;
        let mut out = Vec::with_capacity(data.len() / block * self.dim());
        for chunk in data.chunks(INFER_CHUNK * block) {
            let x = blocks_to_tensor(chunk, side);
            let feat = match &self.net {
                Network::Small(n) => n.infer(&x),
                Network::ResNet(n) => n.infer(&x),
            };
            out.extend(mean_pool(&feat));
        }
        Ok(out)
    }

    /// Training-mode forward pass; must be followed by [`Encoder::backward`].
    pub fn forward_train(&mut self, data: &[f32], side: usize) -> Result<Vec<f32>> {
        self.check_blocks(data, side)?;
        let x = blocks_to_tensor(data, side);
        let feat = match &mut self.net {
            Network::Small(n) => n.forward(&x),
            Network::ResNet(n) => n.forward(&x),
        };
        self.pending = Some(feat.shape());
        Ok(mean_pool(&feat))
    }

    /// Back-propagates `dL/dz` (one row per block) into parameter gradients.
    pub fn backward(&mut self, grad_embeddings: &[f32]) {
        let [n, h, w, c] = self
            .pending
            .take()
            .expect("Encoder::backward called without forward_train");
        let dy = mean_pool_backward(grad_embeddings, n, h, w, c);
        match &mut self.net {
            Network::Small(net) => net.backward(dy),
            Network::ResNet(net) => net.backward(dy),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_count()
    }
}

impl Stateful for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match &self.net {
            Network::Small(n) => n.collect(prefix, out),
            Network::ResNet(n) => n.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match &mut self.net {
            Network::Small(n) => n.collect_mut(prefix, out),
            Network::ResNet(n) => n.collect_mut(prefix, out),
        }
    }
}

pub fn encode(blocks: &SubpatchBlocks, encoder: &Encoder) -> Result<EmbeddingGrid> {
    let values = encoder.embed(&blocks.data, blocks.side)?;
    Ok(EmbeddingGrid {
        patches_per_axis: blocks.patches_per_axis,
        subpatches_per_patch_axis: blocks.subpatches_per_patch_axis,
        dim: encoder.dim(),
        values,
    })
}

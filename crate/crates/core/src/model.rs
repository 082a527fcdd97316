//! Network assembly: parallel multi-kernel convolution front-ends, strided
//! pre-activation residual blocks with channel/temporal attention, a
//! bidirectional GRU head, and intermediate multimodal fusion via
//! self-attention over time tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetItem, Modality, WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv1d, DepthwiseConv1d, Linear};
use crate::nn::ops::{self, Activation, PoolKind};
use crate::nn::rnn::BiGru;
use crate::nn::tensor::{Parameter, Real, Tensor};
use crate::nn::{BatchNorm1d, Phase};
use crate::rng::RngStream;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Residual block flavor (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Plain convolutions + channel/temporal attention.
    ResNetCbam,
    /// Plain convolutions, no attention.
    ResNetPlain,
    /// Depthwise-separable convolutions, no attention.
    Dsc,
    /// Depthwise-separable convolutions + attention.
    DscCbam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    SelfAttention,
}

/// Per-modality trunk architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub modality: Modality,
    pub in_channels: usize,
    pub sample_rate_hz: u32,
    pub kernels: Vec<usize>,
    pub resnet_blocks: usize,
    pub feature_maps: usize,
    pub gru_hidden: usize,
    pub cbam_reduction: usize,
    /// Feed the GRU the raw window instead of the trunk output.
    pub gru_on_raw: bool,
}

impl ModalityConfig {
    /// Published per-modality defaults (unimodal, 64 feature maps).
    pub fn default_unimodal(modality: Modality) -> Self {
        let (kernels, blocks) = match modality {
            Modality::Eeg => (vec![3, 9], 8),
            Modality::Ecg => (vec![5, 11], 9),
            Modality::Eda => (vec![13], 7),
        };
        ModalityConfig {
            modality,
            in_channels: modality.channels(),
            sample_rate_hz: modality.canonical_sample_rate_hz(),
            kernels,
            resnet_blocks: blocks,
            feature_maps: 64,
            gru_hidden: 64,
            cbam_reduction: 8,
            gru_on_raw: false,
        }
    }

    /// Same trunks at 32 feature maps, for the multimodal model.
    pub fn default_multimodal(modality: Modality) -> Self {
        ModalityConfig {
            feature_maps: 32,
            ..ModalityConfig::default_unimodal(modality)
        }
    }

    /// Desk-scale configuration: reduced sample rate, 4 blocks, 16 maps.
    pub fn tiny(modality: Modality) -> Self {
        let sample_rate_hz = match modality {
            Modality::Eeg => 32,
            Modality::Ecg => 64,
            Modality::Eda => 32,
        };
        let resnet_blocks = match modality {
            Modality::Ecg => 5,
            _ => 4,
        };
        ModalityConfig {
            modality,
            in_channels: modality.channels(),
            sample_rate_hz,
            kernels: vec![3, 9],
            resnet_blocks,
            feature_maps: 16,
            gru_hidden: 16,
            cbam_reduction: 4,
            gru_on_raw: false,
        }
    }

    pub fn window_len(&self) -> usize {
        WINDOW_SECONDS as usize * self.sample_rate_hz as usize
    }

    pub fn trunk_out_len(&self) -> usize {
        self.window_len() >> self.resnet_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("at least one kernel size required".into()));
        }
        if self.kernels.iter().any(|&k| k == 0) {
            return Err(Error::Config("kernel sizes must be positive".into()));
        }
        if self.feature_maps == 0 || self.feature_maps % self.kernels.len() != 0 {
            return Err(Error::Config(format!(
                "feature maps {} not divisible by {} parallel kernels",
                self.feature_maps,
                self.kernels.len()
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let window = self.window_len();
        if self.resnet_blocks == 0 || window % (1 << self.resnet_blocks) != 0 {
            return Err(Error::Config(format!(
                "2^{} must divide the window length {window}",
                self.resnet_blocks
            )));
        }
        if self.cbam_reduction == 0 || self.feature_maps % self.cbam_reduction != 0 {
            return Err(Error::Config(format!(
                "feature maps {} not divisible by attention reduction {}",
                self.feature_maps, self.cbam_reduction
            )));
        }
        if self.trunk_out_len() < 7 {
            return Err(Error::Config(format!(
                "trunk output length {} too short for the temporal attention kernel (7)",
                self.trunk_out_len()
            )));
        }
        if self.gru_hidden == 0 {
            return Err(Error::Config("gru_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Whole-network description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub modalities: Vec<ModalityConfig>,
    pub num_classes: usize,
    pub dropout: f64,
    pub fusion: Fusion,
    pub use_gru: bool,
    pub block_kind: BlockKind,
}

impl NetConfig {
    pub fn unimodal(config: ModalityConfig, num_classes: usize) -> Self {
        NetConfig {
            modalities: vec![config],
            num_classes,
            dropout: 0.25,
            fusion: Fusion::None,
            use_gru: true,
            block_kind: BlockKind::ResNetCbam,
        }
    }

    pub fn multimodal(configs: Vec<ModalityConfig>, num_classes: usize) -> Self {
        NetConfig {
            modalities: configs,
            num_classes,
            dropout: 0.25,
            fusion: Fusion::SelfAttention,
            use_gru: true,
            block_kind: BlockKind::ResNetCbam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality required".into()));
        }
        for mc in &self.modalities {
            mc.validate()?;
        }
        if !(self.num_classes == 2 || self.num_classes == 3) {
            return Err(Error::Config(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        let single = self.modalities.len() == 1;
        match self.fusion {
            Fusion::None if !single => {
                return Err(Error::Config(
                    "multimodal configuration requires fusion".into(),
                ))
            }
            Fusion::SelfAttention if single => {
                return Err(Error::Config(
                    "fusion requires more than one modality".into(),
                ))
            }
            _ => {}
        }
        let out_len = self.modalities[0].trunk_out_len();
        if self.modalities.iter().any(|m| m.trunk_out_len() != out_len) {
            return Err(Error::Config(format!(
                "trunk output lengths differ across modalities: {:?}",
                self.modalities
                    .iter()
                    .map(|m| m.trunk_out_len())
                    .collect::<Vec<_>>()
            )));
        }
        if self.modalities.len() > 1 && self.modalities.iter().any(|m| m.gru_on_raw) {
            return Err(Error::Config(
                "gru_on_raw is a unimodal configuration".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Channel attention: shared bias-free MLP over avg- and max-pooled
/// time-collapsed features, combined through a sigmoid.
pub struct ChannelAttention<T: Real> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Real> ChannelAttention<T> {
    fn new(rng: &RngStream, channels: usize, reduction: usize) -> Self {
        ChannelAttention {
            fc1: Linear::new(&rng.split("fc1"), channels, channels / reduction, false),
            fc2: Linear::new(&rng.split("fc2"), channels / reduction, channels, false),
        }
    }

    /// Returns `(weights [B,C], attended y)`.
    pub fn forward(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let avg = ops::pool(y, PoolKind::GlobalAvgTime)?;
        let max = ops::pool(y, PoolKind::GlobalMaxTime)?;
        let mlp = |x: &Tensor<T>| -> Result<Tensor<T>> {
            self.fc2
                .forward(&ops::activation(Activation::ReLU, &self.fc1.forward(x)?))
        };
        let weights = ops::activation(Activation::Sigmoid, &ops::add(&mlp(&avg)?, &mlp(&max)?)?);
        let attended = ops::scale_channels(y, &weights)?;
        Ok((weights, attended))
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.fc1.append_params(&format!("{prefix}.fc1"), out);
        self.fc2.append_params(&format!("{prefix}.fc2"), out);
    }
}

/// Temporal attention: a kernel-7 convolution over stacked channel
/// average/max maps, squashed to per-step weights.
pub struct TemporalAttention<T: Real> {
    conv: Conv1d<T>,
}

impl<T: Real> TemporalAttention<T> {
    fn new(rng: &RngStream) -> Self {
        TemporalAttention {
            conv: Conv1d::new(&rng.split("conv"), 2, 1, 7, 1, false),
        }
    }

    /// Returns `(weights [B,L], attended y)`. Requires `L >= 7`.
    pub fn forward(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let &[b, _, l] = y.shape() else {
            return Err(Error::Shape(format!(
                "temporal attention expects [B,C,L], got {:?}",
                y.shape()
            )));
        };
        if l < 7 {
            return Err(Error::Config(format!(
                "temporal attention needs length >= 7, got {l}"
            )));
        }
        let avg = ops::pool(y, PoolKind::AvgOverChannels)?;
        let max = ops::pool(y, PoolKind::MaxOverChannels)?;
        let stacked = ops::concat(&[avg, max], 1)?;
        let raw = self.conv.forward(&stacked)?;
        let weights = ops::activation(Activation::Sigmoid, &ops::reshape(&raw, vec![b, l])?);
        let attended = ops::scale_time(y, &weights)?;
        Ok((weights, attended))
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.conv.append_params(&format!("{prefix}.conv"), out);
    }
}

/// Channel attention followed by temporal attention.
pub struct Cbam<T: Real> {
    pub channel: ChannelAttention<T>,
    pub temporal: TemporalAttention<T>,
}

impl<T: Real> Cbam<T> {
    fn new(rng: &RngStream, channels: usize, reduction: usize) -> Self {
        Cbam {
            channel: ChannelAttention::new(&rng.split("channel"), channels, reduction),
            temporal: TemporalAttention::new(&rng.split("temporal")),
        }
    }

    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, after_channel) = self.channel.forward(y)?;
        let (_, after_temporal) = self.temporal.forward(&after_channel)?;
        Ok(after_temporal)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.channel.append_params(&format!("{prefix}.channel"), out);
        self.temporal.append_params(&format!("{prefix}.temporal"), out);
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

enum ConvVariant<T: Real> {
    Plain(Conv1d<T>),
    Separable {
        depthwise: DepthwiseConv1d<T>,
        pointwise: Conv1d<T>,
    },
}

impl<T: Real> ConvVariant<T> {
    fn new(rng: &RngStream, kind: BlockKind, channels: usize, stride: usize) -> Self {
        match kind {
            BlockKind::ResNetCbam | BlockKind::ResNetPlain => {
                ConvVariant::Plain(Conv1d::new(rng, channels, channels, 3, stride, true))
            }
            BlockKind::Dsc | BlockKind::DscCbam => ConvVariant::Separable {
                depthwise: DepthwiseConv1d::new(&rng.split("depthwise"), channels, 3, stride, false),
                pointwise: Conv1d::new(&rng.split("pointwise"), channels, channels, 1, 1, true),
            },
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ConvVariant::Plain(conv) => conv.forward(x),
            ConvVariant::Separable { depthwise, pointwise } => {
                pointwise.forward(&depthwise.forward(x)?)
            }
        }
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        match self {
            ConvVariant::Plain(conv) => conv.append_params(prefix, out),
            ConvVariant::Separable { depthwise, pointwise } => {
                depthwise.append_params(&format!("{prefix}.depthwise"), out);
                pointwise.append_params(&format!("{prefix}.pointwise"), out);
            }
        }
    }

    /// Zero every tensor (residual-identity tests).
    #[cfg(test)]
    fn zero(&self) {
        let mut params = Vec::new();
        self.append_params("z", &mut params);
        for p in params {
            p.tensor.with_data_mut(|d| d.iter_mut().for_each(|v| *v = T::zero()));
        }
    }
}

/// Pre-activation residual block that halves the temporal dimension:
/// `y = shortcut(x) + conv_s1(relu(bn(conv_s2(relu(bn(x))))))`, optionally
/// followed by attention.
pub struct ResBlock<T: Real> {
    bn1: BatchNorm1d<T>,
    conv1: ConvVariant<T>,
    bn2: BatchNorm1d<T>,
    conv2: ConvVariant<T>,
    shortcut: Conv1d<T>,
    cbam: Option<Cbam<T>>,
}

impl<T: Real> ResBlock<T> {
    fn new(rng: &RngStream, kind: BlockKind, channels: usize, reduction: usize) -> Self {
        let cbam = match kind {
            BlockKind::ResNetCbam | BlockKind::DscCbam => {
                Some(Cbam::new(&rng.split("cbam"), channels, reduction))
            }
            BlockKind::ResNetPlain | BlockKind::Dsc => None,
        };
        ResBlock {
            bn1: BatchNorm1d::new(channels),
            conv1: ConvVariant::new(&rng.split("conv1"), kind, channels, 2),
            bn2: BatchNorm1d::new(channels),
            conv2: ConvVariant::new(&rng.split("conv2"), kind, channels, 1),
            shortcut: Conv1d::new(&rng.split("shortcut"), channels, channels, 1, 2, true),
            cbam,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let &[_, _, l] = x.shape() else {
            return Err(Error::Shape(format!("block expects [B,C,L], got {:?}", x.shape())));
        };
        if l % 2 != 0 {
            return Err(Error::Shape(format!("block requires even length, got {l}")));
        }
        let h = ops::activation(Activation::ReLU, &self.bn1.forward(x, phase)?);
        let h = self.conv1.forward(&h)?;
        let h = ops::activation(Activation::ReLU, &self.bn2.forward(&h, phase)?);
        let residual = self.conv2.forward(&h)?;
        let y = ops::add(&self.shortcut.forward(x)?, &residual)?;
        match &self.cbam {
            Some(cbam) => cbam.forward(&y),
            None => Ok(y),
        }
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.bn1.append_params(&format!("{prefix}.bn1"), out);
        self.conv1.append_params(&format!("{prefix}.conv1"), out);
        self.bn2.append_params(&format!("{prefix}.bn2"), out);
        self.conv2.append_params(&format!("{prefix}.conv2"), out);
        self.shortcut.append_params(&format!("{prefix}.shortcut"), out);
        if let Some(cbam) = &self.cbam {
            cbam.append_params(&format!("{prefix}.cbam"), out);
        }
    }

    fn append_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        let mut params = Vec::new();
        self.append_params(prefix, &mut params);
        out.extend(params.into_iter().map(|p| (p.name, p.tensor)));
        // running stats live outside the trainable set
        self.bn1.append_state_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.append_state_buffers(&format!("{prefix}.bn2"), out);
    }
}

/// Parallel multi-kernel front-end: one conv->bn->silu branch per kernel
/// size, concatenated along channels to exactly `feature_maps` outputs.
pub struct ParallelConvBlock<T: Real> {
    branches: Vec<(Conv1d<T>, BatchNorm1d<T>)>,
    kernels: Vec<usize>,
}

impl<T: Real> ParallelConvBlock<T> {
    fn new(rng: &RngStream, config: &ModalityConfig) -> Self {
        let per_branch = config.feature_maps / config.kernels.len();
        let branches = config
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let branch_rng = rng.split(&format!("branch{i}_k{k}"));
                (
                    Conv1d::new(&branch_rng.split("conv"), config.in_channels, per_branch, k, 1, true),
                    BatchNorm1d::new(per_branch),
                )
            })
            .collect();
        ParallelConvBlock {
            branches,
            kernels: config.kernels.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter()
            .map(|(conv, bn)| {
                Ok(ops::activation(
                    Activation::SiLU,
                    &bn.forward(&conv.forward(x)?, phase)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        ops::concat(&outs, 1)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        for (i, ((conv, bn), k)) in self.branches.iter().zip(&self.kernels).enumerate() {
            let name = format!("{prefix}.branch{i}_k{k}");
            conv.append_params(&format!("{name}.conv"), out);
            bn.append_params(&format!("{name}.bn"), out);
        }
    }

    fn append_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        let mut params = Vec::new();
        self.append_params(prefix, &mut params);
        out.extend(params.into_iter().map(|p| (p.name, p.tensor)));
        for (i, ((_, bn), k)) in self.branches.iter().zip(&self.kernels).enumerate() {
            bn.append_state_buffers(&format!("{prefix}.branch{i}_k{k}.bn"), out);
        }
    }
}

/// Front-end plus stacked residual blocks; output `[B, F, L / 2^blocks]`.
pub struct UnimodalTrunk<T: Real> {
    pub config: ModalityConfig,
    parallel: ParallelConvBlock<T>,
    blocks: Vec<ResBlock<T>>,
}

impl<T: Real> UnimodalTrunk<T> {
    fn new(rng: &RngStream, config: &ModalityConfig, kind: BlockKind) -> Self {
        let parallel = ParallelConvBlock::new(&rng.split("parallel"), config);
        let blocks = (0..config.resnet_blocks)
            .map(|i| {
                ResBlock::new(
                    &rng.split(&format!("block{i}")),
                    kind,
                    config.feature_maps,
                    config.cbam_reduction,
                )
            })
            .collect();
        UnimodalTrunk {
            config: config.clone(),
            parallel,
            blocks,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let &[_, c, l] = x.shape() else {
            return Err(Error::Shape(format!("trunk expects [B,C,L], got {:?}", x.shape())));
        };
        if c != self.config.in_channels || l != self.config.window_len() {
            return Err(Error::Shape(format!(
                "trunk built for [{}, {}], got [{c}, {l}]",
                self.config.in_channels,
                self.config.window_len()
            )));
        }
        let mut h = self.parallel.forward(x, phase)?;
        for block in &self.blocks {
            h = block.forward(&h, phase)?;
        }
        debug_assert_eq!(h.shape()[2], self.config.trunk_out_len());
        Ok(h)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.parallel.append_params(&format!("{prefix}.parallel"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.append_params(&format!("{prefix}.block{i}"), out);
        }
    }

    fn append_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.parallel.append_state(&format!("{prefix}.parallel"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.append_state(&format!("{prefix}.block{i}"), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion and head
// ---------------------------------------------------------------------------

/// Single-head scaled dot-product self-attention over time tokens with a
/// residual connection; `out = tokens + softmax(QK^T / sqrt(d)) V`.
pub struct FusionAttention<T: Real> {
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    width: usize,
}

impl<T: Real> FusionAttention<T> {
    fn new(rng: &RngStream, width: usize) -> Self {
        FusionAttention {
            q: Linear::new(&rng.split("q"), width, width, false),
            k: Linear::new(&rng.split("k"), width, width, false),
            v: Linear::new(&rng.split("v"), width, width, false),
            width,
        }
    }

    /// Concatenate per-modality sequences `[B,F_i,L]` along channels and
    /// attend over the L time tokens. Returns `[B, sum F_i, L]`.
    pub fn forward(&self, seqs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let fused = ops::concat(seqs, 1)?;
        let &[b, d, l] = fused.shape() else {
            return Err(Error::Shape("fusion expects rank-3 sequences".into()));
        };
        if d != self.width {
            return Err(Error::Shape(format!(
                "fusion built for width {}, got {d}",
                self.width
            )));
        }
        let tokens = ops::transpose_cl(&fused)?; // [B, L, D]
        let flat = ops::reshape(&tokens, vec![b * l, d])?;
        let project = |layer: &Linear<T>| -> Result<Tensor<T>> {
            ops::reshape(&layer.forward(&flat)?, vec![b, l, d])
        };
        let q = project(&self.q)?;
        let k = project(&self.k)?;
        let v = project(&self.v)?;
        let k_t = ops::transpose_cl(&k)?; // [B, D, L]
        let scores = ops::affine(&ops::bmm(&q, &k_t)?, 1.0 / (d as f64).sqrt(), 0.0);
        let attn = ops::softmax_lastdim(&scores)?;
        let mixed = ops::bmm(&attn, &v)?;
        let out_tokens = ops::add(&tokens, &mixed)?;
        ops::transpose_cl(&out_tokens) // back to [B, D, L]
    }

    /// Attention row weights for inspection: `[B, L, L]`, rows sum to 1.
    pub fn attention_weights(&self, seqs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let fused = ops::concat(seqs, 1)?;
        let &[b, d, l] = fused.shape() else {
            return Err(Error::Shape("fusion expects rank-3 sequences".into()));
        };
        let tokens = ops::transpose_cl(&fused)?;
        let flat = ops::reshape(&tokens, vec![b * l, d])?;
        let q = ops::reshape(&self.q.forward(&flat)?, vec![b, l, d])?;
        let k = ops::reshape(&self.k.forward(&flat)?, vec![b, l, d])?;
        let k_t = ops::transpose_cl(&k)?;
        let scores = ops::affine(&ops::bmm(&q, &k_t)?, 1.0 / (d as f64).sqrt(), 0.0);
        ops::softmax_lastdim(&scores)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        self.q.append_params(&format!("{prefix}.q"), out);
        self.k.append_params(&format!("{prefix}.k"), out);
        self.v.append_params(&format!("{prefix}.v"), out);
    }
}

/// Classification head: global average of the sequence, optional BiGRU
/// summary, dropout, and the final fully connected layer.
pub struct Head<T: Real> {
    gru: Option<BiGru<T>>,
    fc: Linear<T>,
    dropout: f64,
    gru_on_raw: bool,
}

impl<T: Real> Head<T> {
    fn new(
        rng: &RngStream,
        seq_channels: usize,
        gru_input: usize,
        gru_hidden: usize,
        use_gru: bool,
        gru_on_raw: bool,
        dropout: f64,
        num_classes: usize,
    ) -> Self {
        let gru = use_gru.then(|| BiGru::new(&rng.split("gru"), gru_input, gru_hidden));
        let fc_in = seq_channels + if use_gru { 2 * gru_hidden } else { 0 };
        Head {
            gru,
            fc: Linear::new(&rng.split("fc"), fc_in, num_classes, true),
            dropout,
            gru_on_raw,
        }
    }

    fn forward(
        &self,
        seq: &Tensor<T>,
        raw: Option<&Tensor<T>>,
        phase: Phase,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        let pooled = ops::pool(seq, PoolKind::GlobalAvgTime)?;
        let features = match &self.gru {
            Some(gru) => {
                let source = if self.gru_on_raw {
                    raw.ok_or_else(|| Error::Shape("gru_on_raw head needs the raw batch".into()))?
                } else {
                    seq
                };
                let (_, final_state) = gru.forward(&ops::transpose_cl(source)?)?;
                ops::concat(&[pooled, final_state], 1)?
            }
            None => pooled,
        };
        let dropped = if phase == Phase::Train && self.dropout > 0.0 {
            let rng = rng.ok_or_else(|| {
                Error::Config("training forward pass requires a dropout RNG".into())
            })?;
            ops::dropout(&features, self.dropout, rng, phase)
        } else {
            features
        };
        self.fc.forward(&dropped)
    }

    fn append_params(&self, prefix: &str, out: &mut Vec<Parameter<T>>) {
        if let Some(gru) = &self.gru {
            gru.append_params(&format!("{prefix}.gru"), out);
        }
        self.fc.append_params(&format!("{prefix}.fc"), out);
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A batch ready for the network: one `[B, C, L]` tensor per modality.
pub struct Batch<T: Real> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<usize>,
}

/// Assemble a batch from dataset items (windows convert to the compute
/// precision here).
pub fn batch_from_items<T: Real>(
    items: &[&DatasetItem],
    labels: &[usize],
    n_modalities: usize,
) -> Result<Batch<T>> {
    if items.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if items.len() != labels.len() {
        return Err(Error::Validation("items/labels length mismatch".into()));
    }
    let mut inputs = Vec::with_capacity(n_modalities);
    for m in 0..n_modalities {
        let c = items[0].windows[m].channels();
        let l = items[0].windows[m].samples_per_channel();
        let mut data = Vec::with_capacity(items.len() * c * l);
        for item in items {
            let w = &item.windows[m];
            if w.channels() != c || w.samples_per_channel() != l {
                return Err(Error::Shape("inconsistent window shapes in batch".into()));
            }
            for ch in &w.data {
                data.extend(ch.iter().map(|&v| T::cast(v)));
            }
        }
        inputs.push(Tensor::from_vec(vec![items.len(), c, l], data));
    }
    Ok(Batch {
        inputs,
        targets: labels.to_vec(),
    })
}

/// The assembled network.
pub struct Model<T: Real> {
    pub config: NetConfig,
    pub seed: u64,
    trunks: Vec<UnimodalTrunk<T>>,
    fusion: Option<FusionAttention<T>>,
    head: Head<T>,
}

/// Build a model with deterministic parameter initialization from the seed.
pub fn build_model<T: Real>(config: &NetConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let root = RngStream::new(seed).split("model");
    let trunks: Vec<UnimodalTrunk<T>> = config
        .modalities
        .iter()
        .map(|mc| {
            UnimodalTrunk::new(
                &root.split("trunk").split(mc.modality.name()),
                mc,
                config.block_kind,
            )
        })
        .collect();
    let seq_channels: usize = config.modalities.iter().map(|m| m.feature_maps).sum();
    let fusion = match config.fusion {
        Fusion::SelfAttention => Some(FusionAttention::new(&root.split("fusion"), seq_channels)),
        Fusion::None => None,
    };
    let first = &config.modalities[0];
    let gru_on_raw = first.gru_on_raw;
    let gru_input = if gru_on_raw {
        first.in_channels
    } else {
        seq_channels
    };
    let head = Head::new(
        &root.split("head"),
        seq_channels,
        gru_input,
        first.gru_hidden,
        config.use_gru,
        gru_on_raw,
        config.dropout,
        config.num_classes,
    );
    Ok(Model {
        config: config.clone(),
        seed,
        trunks,
        fusion,
        head,
    })
}

impl<T: Real> Model<T> {
    /// Logits for a batch. Train mode needs a dropout RNG; eval mode runs
    /// with running statistics and no dropout.
    pub fn forward(
        &self,
        batch: &Batch<T>,
        phase: Phase,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        if batch.inputs.len() != self.trunks.len() {
            return Err(Error::Shape(format!(
                "batch has {} modalities, model expects {}",
                batch.inputs.len(),
                self.trunks.len()
            )));
        }
        let seqs = self
            .trunks
            .iter()
            .zip(&batch.inputs)
            .map(|(trunk, x)| trunk.forward(x, phase))
            .collect::<Result<Vec<_>>>()?;
        let seq = match &self.fusion {
            Some(fusion) => fusion.forward(&seqs)?,
            None => seqs.into_iter().next().expect("at least one trunk"),
        };
        self.head.forward(&seq, Some(&batch.inputs[0]), phase, rng)
    }

    /// Eval-mode forward without recording the autodiff graph.
    pub fn infer(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        crate::nn::no_grad(|| self.forward(batch, Phase::Eval, None))
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        for trunk in &self.trunks {
            trunk.append_params(&format!("trunk.{}", trunk.config.modality.name()), &mut out);
        }
        if let Some(fusion) = &self.fusion {
            fusion.append_params("fusion", &mut out);
        }
        self.head.append_params("head", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Trainable parameters plus batch-norm running buffers, in a stable
    /// order, for checkpoints.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for trunk in &self.trunks {
            trunk.append_state(&format!("trunk.{}", trunk.config.modality.name()), &mut out);
        }
        if let Some(fusion) = &self.fusion {
            let mut params = Vec::new();
            fusion.append_params("fusion", &mut params);
            out.extend(params.into_iter().map(|p| (p.name, p.tensor)));
        }
        let mut params = Vec::new();
        self.head.append_params("head", &mut params);
        out.extend(params.into_iter().map(|p| (p.name, p.tensor)));
        out
    }

    /// Copy current parameter values (used for best-epoch checkpointing).
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.state()
            .into_iter()
            .map(|(name, t)| (name, t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<T>)]) {
        let state = self.state();
        assert_eq!(state.len(), snapshot.len(), "snapshot shape drift");
        for ((name, tensor), (snap_name, values)) in state.iter().zip(snapshot) {
            assert_eq!(name, snap_name, "snapshot order drift");
            tensor.set_data(values.clone());
        }
    }
}

impl<T: Real> BatchNorm1d<T> {
    /// Running buffers only (parameters are appended separately).
    pub fn append_state_buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

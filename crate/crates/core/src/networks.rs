//! The style-removal generator (encoder/decoder with residual skip
//! connections and embedded spatial transformers) and the discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    apply_bn_updates, flatten, BatchNorm, Binding, Conv, ConvTranspose, Linear, Mode, ParamStore,
};
use crate::stn::{stn_forward, LocNet, LocNetSpec, StnSite};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrnConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 encoder (and decoder) layers.
    pub depth: usize,
    /// Deepest encoder layers (excluding the bottleneck) linked to the decoder.
    pub skip_layers: usize,
    pub residual_blocks_per_skip: usize,
    pub stn_sites: Vec<StnSite>,
    /// Width multiplier for the localization networks; `None` means
    /// `base_channels / 32`.
    pub stn_width_scale: Option<f64>,
    pub negative_slope: f64,
    pub bn_momentum: f64,
}

impl Default for SrnConfig {
    fn default() -> Self {
        SrnConfig {
            image_size: 128,
            base_channels: 32,
            depth: 5,
            skip_layers: 2,
            residual_blocks_per_skip: 3,
            stn_sites: StnSite::ALL.to_vec(),
            stn_width_scale: None,
            negative_slope: 0.2,
            bn_momentum: 0.9,
        }
    }
}

impl SrnConfig {
    /// Small CPU-trainable configuration with the same topology.
    pub fn desk() -> Self {
        SrnConfig {
            image_size: 32,
            base_channels: 8,
            ..Default::default()
        }
    }

    pub fn channels(&self, layer: usize) -> usize {
        if layer == 0 {
            3
        } else {
            self.base_channels << (layer - 1)
        }
    }

    pub fn width_scale(&self) -> f64 {
        self.stn_width_scale
            .unwrap_or(self.base_channels as f64 / 32.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be positive".into()));
        }
        if self.depth >= usize::BITS as usize || self.image_size % (1usize << self.depth) != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.skip_layers >= self.depth {
            return Err(Error::Config(format!(
                "{} skip layers need more than {} encoder layers",
                self.skip_layers, self.depth
            )));
        }
        for site in &self.stn_sites {
            let needed = match site {
                StnSite::Encoder1 => 1,
                StnSite::Encoder2 => 2,
                StnSite::Encoder3 | StnSite::DecoderMid => 3,
            };
            if self.depth < needed {
                return Err(Error::Config(format!(
                    "{} needs depth >= {}",
                    site.label(),
                    needed
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// `(H, W, C)` of the feature map each transformer reads.
    pub fn stn_input(&self, site: StnSite) -> (usize, usize, usize) {
        let s = self.image_size;
        match site {
            StnSite::Encoder1 => (s / 2, s / 2, self.channels(1)),
            StnSite::Encoder2 => (s / 4, s / 4, self.channels(2)),
            StnSite::Encoder3 => (s / 8, s / 8, self.channels(3)),
            StnSite::DecoderMid => (s / 4, s / 4, self.channels(2)),
        }
    }
}

/// `y = x + f(x)` with `f = conv3x3 - BN - leakyReLU - conv3x3 - BN`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    slope: f64,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        channels: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, false, rng);
        let bn1 = BatchNorm::new(store, buffers, &format!("{name}.bn1"), channels);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, false, rng);
        let bn2 = BatchNorm::new(store, buffers, &format!("{name}.bn2"), channels);
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            slope,
        }
    }

    pub fn conv_weights(&self) -> [crate::nn::ParamId; 2] {
        [self.conv1.weight, self.conv2.weight]
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Var {
        let mut h = self.conv1.forward(tape, b, x);
        h = self.bn1.forward(tape, b, h);
        h = tape.leaky_relu(h, self.slope);
        h = self.conv2.forward(tape, b, h);
        h = self.bn2.forward(tape, b, h);
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    deconv: ConvTranspose,
    bn: Option<BatchNorm>,
}

/// Style-removal network: maps `N x 3 x S x S` portraits in `[-1, 1]` to
/// recovered faces in `(-1, 1)`.
#[derive(Clone, Debug)]
pub struct Srn {
    pub config: SrnConfig,
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    encoder: Vec<(Conv, BatchNorm)>,
    decoder: Vec<DecoderLayer>,
    skips: Vec<Vec<ResidualBlock>>,
    stns: Vec<(StnSite, LocNet)>,
}

impl Srn {
    pub fn build(config: SrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let slope = config.negative_slope;

        let mut encoder = Vec::new();
        for i in 1..=config.depth {
            let conv = Conv::new(
                &mut params,
                &format!("enc{i}.conv"),
                config.channels(i - 1),
                config.channels(i),
                4,
                2,
                1,
                false,
                &mut rng,
            );
            let bn = BatchNorm::new(&mut params, &mut buffers, &format!("enc{i}.bn"), config.channels(i));
            encoder.push((conv, bn));
        }

        let mut decoder = Vec::new();
        for j in 1..=config.depth {
            let cin = config.channels(config.depth - j + 1);
            let cout = config.channels(config.depth - j);
            let last = j == config.depth;
            let deconv = ConvTranspose::new(&mut params, &format!("dec{j}.deconv"), cin, cout, 4, 2, 1, last, &mut rng);
            let bn = (!last).then(|| BatchNorm::new(&mut params, &mut buffers, &format!("dec{j}.bn"), cout));
            decoder.push(DecoderLayer { deconv, bn });
        }

        let mut skips = Vec::new();
        for j in 1..=config.skip_layers {
            let c = config.channels(config.depth - j);
            let blocks = (0..config.residual_blocks_per_skip)
                .map(|r| ResidualBlock::new(&mut params, &mut buffers, &format!("skip{j}.res{r}"), c, slope, &mut rng))
                .collect();
            skips.push(blocks);
        }

        let mut sites = config.stn_sites.clone();
        sites.sort();
        sites.dedup();
        let mut stns = Vec::new();
        for site in sites {
            let spec = LocNetSpec::for_site(site, config.stn_input(site), config.width_scale());
            let loc = LocNet::new(&mut params, site.label(), spec, &mut rng)?;
            stns.push((site, loc));
        }

        Ok(Srn {
            config,
            params,
            buffers,
            encoder,
            decoder,
            skips,
            stns,
        })
    }

    pub fn stns(&self) -> &[(StnSite, LocNet)] {
        &self.stns
    }

    pub fn skip_blocks(&self) -> &[Vec<ResidualBlock>] {
        &self.skips
    }

    fn stn_at(&self, site: StnSite) -> Option<&LocNet> {
        self.stns.iter().find(|(s, _)| *s == site).map(|(_, l)| l)
    }

    fn maybe_stn(&self, tape: &mut Tape, b: &mut Binding, site: StnSite, x: Var) -> Result<Var> {
        match self.stn_at(site) {
            Some(loc) => stn_forward(tape, b, loc, x),
            None => Ok(x),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "generator expects N x 3 x {s} x {s}, got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let slope = self.config.negative_slope;
        let depth = self.config.depth;
        let encoder_sites = [StnSite::Encoder1, StnSite::Encoder2, StnSite::Encoder3];

        let mut feats = Vec::with_capacity(depth);
        let mut h = x;
        for (i, (conv, bn)) in self.encoder.iter().enumerate() {
            h = conv.forward(tape, b, h);
            h = bn.forward(tape, b, h);
            h = tape.leaky_relu(h, slope);
            if let Some(&site) = encoder_sites.get(i) {
                h = self.maybe_stn(tape, b, site, h)?;
            }
            feats.push(h);
        }

        for (j, layer) in self.decoder.iter().enumerate() {
            let j = j + 1;
            h = layer.deconv.forward(tape, b, h);
            match &layer.bn {
                Some(bn) => {
                    h = bn.forward(tape, b, h);
                    h = tape.leaky_relu(h, slope);
                }
                None => h = tape.tanh(h),
            }
            if let Some(blocks) = self.skips.get(j - 1) {
                let mut s = feats[depth - j - 1];
                for block in blocks {
                    s = block.forward(tape, b, s);
                }
                h = tape.add(h, s);
            }
            if depth >= 3 && j == depth - 2 {
                h = self.maybe_stn(tape, b, StnSite::DecoderMid, h)?;
            }
        }
        Ok(h)
    }

    /// Inference-mode forward pass on a detached batch.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binding::new(&self.params, &self.buffers, false, Mode::Eval);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, &mut b, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BatchNorm, crate::autograd::BatchStats)]) {
        apply_bn_updates(&mut self.buffers, updates, self.config.bn_momentum);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub negative_slope: f64,
    pub bn_momentum: f64,
}

impl Default for DnConfig {
    fn default() -> Self {
        DnConfig {
            image_size: 128,
            base_channels: 32,
            negative_slope: 0.2,
            bn_momentum: 0.9,
        }
    }
}

impl DnConfig {
    pub fn matching(srn: &SrnConfig) -> Self {
        DnConfig {
            image_size: srn.image_size,
            base_channels: srn.base_channels,
            negative_slope: srn.negative_slope,
            bn_momentum: srn.bn_momentum,
        }
    }

    /// Number of stride-2 conv layers needed to reach 4x4.
    pub fn conv_layers(&self) -> Result<usize> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator needs a power-of-two image size >= 8, got {s}"
            )));
        }
        Ok((s / 4).trailing_zeros() as usize)
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.base_channels << (layer - 1)
    }

    /// Closed-form parameter count: the first conv carries a bias, later
    /// convs are bias-free with batch-norm scale and shift, and the head is
    /// a single-output linear layer on the 4x4 map.
    pub fn parameter_count(&self) -> Result<usize> {
        let layers = self.conv_layers()?;
        let mut total = 3 * self.channels(1) * 16 + self.channels(1);
        for l in 2..=layers {
            total += self.channels(l - 1) * self.channels(l) * 16 + 2 * self.channels(l);
        }
        total += 16 * self.channels(layers) + 1;
        Ok(total)
    }
}

/// Discriminator: `N x 3 x S x S` to `N x 1` probabilities.
#[derive(Clone, Debug)]
pub struct Dn {
    pub config: DnConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
    convs: Vec<(Conv, Option<BatchNorm>)>,
    head: Linear,
}

impl Dn {
    pub fn build(config: DnConfig, seed: u64) -> Result<Self> {
        let layers = config.conv_layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut convs = Vec::new();
        for l in 1..=layers {
            let cin = if l == 1 { 3 } else { config.channels(l - 1) };
            let first = l == 1;
            let conv = Conv::new(&mut params, &format!("d{l}.conv"), cin, config.channels(l), 4, 2, 1, first, &mut rng);
            let bn = (!first).then(|| BatchNorm::new(&mut params, &mut buffers, &format!("d{l}.bn"), config.channels(l)));
            convs.push((conv, bn));
        }
        let head = Linear::new(&mut params, "head", 16 * config.channels(layers), 1, &mut rng);
        Ok(Dn {
            config,
            params,
            buffers,
            convs,
            head,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!(
                "discriminator expects N x 3 x {size} x {size}, got {s:?}"
            )));
        }
        let mut h = x;
        for (conv, bn) in &self.convs {
            h = conv.forward(tape, b, h);
            if let Some(bn) = bn {
                h = bn.forward(tape, b, h);
            }
            h = tape.leaky_relu(h, self.config.negative_slope);
        }
        let flat = flatten(tape, h);
        let logit = self.head.forward(tape, b, flat);
        Ok(tape.sigmoid(logit))
    }

    /// Probabilities for a detached batch, using batch statistics.
    pub fn probabilities(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binding::new(&self.params, &self.buffers, false, Mode::Train);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, &mut b, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BatchNorm, crate::autograd::BatchStats)]) {
        apply_bn_updates(&mut self.buffers, updates, self.config.bn_momentum);
    }
}

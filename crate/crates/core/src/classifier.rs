//! Residual CNN for five-grade DR classification.
//!
//! stem: zero-pad 3 → conv 7x7 s2 → BN → relu → zero-pad 1 → max-pool 3 s2;
//! then one residual stage per width (the first keeps the resolution, later
//! ones halve it), global average pooling, relu FC layers and a 5-way softmax.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvSpec, ForwardCtx, InitScheme, LayerSpec, Mode, ResidualStageSpec, Sequential};
use crate::params::NetworkParams;
use crate::tensor::{Float, RngStream, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DrClass {
    NoDR = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
    Proliferative = 4,
}

impl DrClass {
    pub const ALL: [DrClass; NUM_CLASSES] =
        [DrClass::NoDR, DrClass::Mild, DrClass::Moderate, DrClass::Severe, DrClass::Proliferative];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Data(format!("class label {i} outside 0..=4")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Subdirectory name in the class-folder dataset layout.
    pub fn dir_name(self) -> &'static str {
        ["0_no_dr", "1_mild", "2_moderate", "3_severe", "4_proliferative"][self.index()]
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir_name() == name)
    }

    pub fn name(self) -> &'static str {
        ["NoDR", "Mild", "Moderate", "Severe", "Proliferative"][self.index()]
    }
}

impl fmt::Display for DrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub stem_channels: usize,
    /// One residual stage per entry.
    pub widths: Vec<usize>,
    pub fc: Vec<usize>,
    pub input_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { stem_channels: 64, widths: vec![64, 128, 256], fc: vec![512], input_size: 224 }
    }
}

impl ClassifierConfig {
    /// The reduced 32x32 configuration used for desk-scale runs.
    pub fn desk() -> Self {
        ClassifierConfig { stem_channels: 16, widths: vec![16, 32], fc: vec![64], input_size: 32 }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("classifier needs at least one stage".into()));
        }
        if self.stem_channels == 0 || self.widths.contains(&0) || self.fc.contains(&0) || self.input_size == 0 {
            return Err(Error::Config("classifier widths and input size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    net: Sequential,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut net = Sequential::new();
        net.push("stem.pad", LayerSpec::ZeroPad2d { pad: 3 })
            .push("stem.conv", LayerSpec::Conv2d(ConvSpec::new(1, config.stem_channels, 7, 2, 0)))
            .push("stem.bn", LayerSpec::BatchNorm { channels: config.stem_channels })
            .push("stem.relu", LayerSpec::Activation(Activation::Relu))
            .push("stem.pool_pad", LayerSpec::ZeroPad2d { pad: 1 })
            .push("stem.pool", LayerSpec::MaxPool2d { window: 3, stride: 2 });
        let mut channels = config.stem_channels;
        for (i, &width) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            net.push(format!("stage{i}"), LayerSpec::ResidualStage(ResidualStageSpec::new(channels, width, stride)));
            channels = width;
        }
        net.push("pool", LayerSpec::GlobalAvgPool);
        for (j, &width) in config.fc.iter().enumerate() {
            net.push(format!("fc{j}"), LayerSpec::Dense { inputs: channels, outputs: width })
                .push(format!("fc{j}.relu"), LayerSpec::Activation(Activation::Relu));
            channels = width;
        }
        net.push("logits", LayerSpec::Dense { inputs: channels, outputs: NUM_CLASSES })
            .push("softmax", LayerSpec::Activation(Activation::Softmax));

        let s = config.input_size;
        let trace = net
            .shape_trace(&[1, 1, s, s])
            .map_err(|e| Error::Config(format!("input size {s} too small for the network: {e}")))?;
        // every stride-2 step must see at least 2x2 before padding
        for (i, (name, layer)) in net.layers().iter().enumerate() {
            let downsamples = match layer {
                LayerSpec::Conv2d(c) => c.stride > 1,
                LayerSpec::MaxPool2d { stride, .. } => *stride > 1,
                LayerSpec::ResidualStage(r) => r.stride > 1,
                _ => false,
            };
            if !downsamples {
                continue;
            }
            let unpadded = match i.checked_sub(1).map(|j| &net.layers()[j].1) {
                Some(LayerSpec::ZeroPad2d { pad }) => trace[i][2] - 2 * pad,
                _ => trace[i][2],
            };
            if unpadded < 2 {
                return Err(Error::Config(format!(
                    "input size {s} too small: `{name}` would downsample a {unpadded}x{unpadded} map"
                )));
            }
        }
        Ok(Classifier { config, net })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.config.input_size, self.config.input_size]
    }

    pub fn init_params(&self, rng: &mut RngStream) -> NetworkParams {
        self.net.init(InitScheme::HeNormal, rng)
    }

    pub fn check_params<T: Float>(&self, params: &NetworkParams<T>) -> Result<()> {
        self.net.check_params(params)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape(0)[1..] {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                left: self.input_shape(shape.first().copied().unwrap_or(0)).to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Class probabilities `[n, 5]`.
    pub fn forward<'t, T: Float>(&self, ctx: &ForwardCtx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        self.net.forward(ctx, x)
    }

    /// Eval-mode probabilities for a `[n, 1, s, s]` batch.
    pub fn predict(&self, params: &NetworkParams, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(images.shape())?;
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, params, Mode::Eval).frozen();
        Ok(self.forward(&ctx, tape.constant(images.clone()))?.value())
    }
}

pub fn build_classifier(config: ClassifierConfig, seed: u64) -> Result<(Classifier, NetworkParams)> {
    let model = Classifier::new(config)?;
    let params = model.init_params(&mut RngStream::derive(seed, &[0xC1A5]));
    Ok((model, params))
}

/// Argmax; ties go to the lowest class index.
pub fn predict_class(probs: &[f32]) -> Result<DrClass> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} probabilities, got {}", probs.len())));
    }
    if let Some(v) = probs.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("probability {v}")));
    }
    let best = (1..NUM_CLASSES).fold(0, |best, i| if probs[i] > probs[best] { i } else { best });
    DrClass::from_index(best)
}

//! DCGAN for grayscale images: a transpose-conv generator from a uniform
//! latent, a leaky-relu/dropout discriminator, alternating Adam updates and
//! intensity-histogram comparison.

use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::imageproc::NormalizedImage;
use crate::layers::activation::LEAKY_SLOPE;
use crate::layers::dropout::DISCRIMINATOR_DROPOUT;
use crate::layers::{Activation, ConvSpec, ForwardCtx, InitScheme, LayerSpec, Mode, Sequential};
use crate::optim::{adam_step, binary_cross_entropy, AdamState};
use crate::params::NetworkParams;
use crate::pipeline::checkpoint::{load_params, save_params};
use crate::tensor::{RngStream, Tape, Tensor};

/// Spatial size of the generator's first feature map.
pub const BASE_SIZE: usize = 8;
pub const INIT_STD: f64 = 0.02;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    /// Channels of the widest discriminator stage divided by 2^(stages-1);
    /// 32 gives 256→128→64→32 at image size 128.
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 100,
            image_size: 128,
            batch_size: 4,
            epochs: 10,
            steps_per_epoch: 3750,
            learning_rate: 0.0002,
            beta1: 0.5,
            base_channels: 32,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.batch_size == 0
            || self.epochs == 0
            || self.steps_per_epoch == 0
            || self.base_channels == 0
        {
            return Err(Error::Config("GAN counts must all be positive".into()));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!("image_size must be a power of two >= 32, got {}", self.image_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!("bad learning_rate {} or beta1 {}", self.learning_rate, self.beta1)));
        }
        Ok(())
    }

    /// Number of ×2 up- or down-sampling stages.
    pub fn stages(&self) -> usize {
        (self.image_size / BASE_SIZE).trailing_zeros() as usize
    }

    /// Channel width of stage `i` counted from the image side.
    fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gan {
    config: GanConfig,
    generator: Sequential,
    discriminator: Sequential,
}

fn generator_net(config: &GanConfig) -> Sequential {
    let stages = config.stages();
    let top = config.width(stages - 1);
    let mut net = Sequential::new();
    net.push("project", LayerSpec::Dense { inputs: config.latent_dim, outputs: top * BASE_SIZE * BASE_SIZE })
        .push("project.reshape", LayerSpec::Reshape(vec![top, BASE_SIZE, BASE_SIZE]))
        .push("project.bn", LayerSpec::BatchNorm { channels: top })
        .push("project.relu", LayerSpec::Activation(Activation::Relu));
    for i in 0..stages {
        let cin = config.width(stages - 1 - i);
        let last = i + 1 == stages;
        let cout = if last { 1 } else { config.width(stages - 2 - i) };
        net.push(format!("up{i}"), LayerSpec::ConvTranspose2d(ConvSpec::new(cin, cout, 4, 2, 1)));
        if last {
            net.push("tanh", LayerSpec::Activation(Activation::Tanh));
        } else {
            net.push(format!("up{i}.bn"), LayerSpec::BatchNorm { channels: cout })
                .push(format!("up{i}.relu"), LayerSpec::Activation(Activation::Relu));
        }
    }
    net
}

fn discriminator_net(config: &GanConfig) -> Sequential {
    let stages = config.stages();
    let mut net = Sequential::new();
    let mut cin = 1;
    for i in 0..stages {
        let cout = config.width(i);
        net.push(format!("down{i}"), LayerSpec::Conv2d(ConvSpec::new(cin, cout, 4, 2, 1)))
            .push(format!("down{i}.lrelu"), LayerSpec::Activation(Activation::LeakyRelu { slope: LEAKY_SLOPE }))
            .push(format!("down{i}.dropout"), LayerSpec::Dropout { rate: DISCRIMINATOR_DROPOUT });
        cin = cout;
    }
    net.push("flatten", LayerSpec::Flatten)
        .push("score", LayerSpec::Dense { inputs: cin * BASE_SIZE * BASE_SIZE, outputs: 1 })
        .push("sigmoid", LayerSpec::Activation(Activation::Sigmoid));
    net
}

impl Gan {
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let generator = generator_net(&config);
        let discriminator = discriminator_net(&config);
        Ok(Gan { config, generator, discriminator })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn generator(&self) -> &Sequential {
        &self.generator
    }

    pub fn discriminator(&self) -> &Sequential {
        &self.discriminator
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, 1, self.config.image_size, self.config.image_size]
    }

    pub fn build_generator(&self, rng: &mut RngStream) -> NetworkParams {
        self.generator.init(InitScheme::Normal { std: INIT_STD }, rng)
    }

    pub fn build_discriminator(&self, rng: &mut RngStream) -> NetworkParams {
        self.discriminator.init(InitScheme::Normal { std: INIT_STD }, rng)
    }

    /// Freshly initialized generator and discriminator for the config seed.
    pub fn init(&self) -> (NetworkParams, NetworkParams) {
        let seed = self.config.seed;
        (
            self.build_generator(&mut RngStream::derive(seed, &[0x6E4, 0])),
            self.build_discriminator(&mut RngStream::derive(seed, &[0x6E4, 1])),
        )
    }

    /// Eval-mode generator output `[n, 1, s, s]`.
    pub fn generate(&self, gen: &NetworkParams, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, gen, Mode::Eval).frozen();
        Ok(self.generator.forward(&ctx, tape.constant(z.clone()))?.value())
    }

    /// Eval-mode discriminator scores `[n, 1]`.
    pub fn discriminate(&self, disc: &NetworkParams, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, disc, Mode::Eval).frozen();
        Ok(self.discriminator.forward(&ctx, tape.constant(images.clone()))?.value())
    }
}

/// `[n, latent_dim]`, entries uniform on [−1, 1].
pub fn sample_latent(n: usize, config: &GanConfig, rng: &mut RngStream) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("latent batch must be non-empty"));
    }
    Ok(Tensor::from_fn([n, config.latent_dim], |_| rng.uniform(-1.0, 1.0) as f32))
}

pub struct GanOptimizers {
    pub gen: AdamState,
    pub disc: AdamState,
}

impl GanOptimizers {
    pub fn new(config: &GanConfig) -> Self {
        GanOptimizers {
            gen: AdamState::new(config.learning_rate, config.beta1),
            disc: AdamState::new(config.learning_rate, config.beta1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(shape, [a.data(), b.data()].concat())
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} {value}")))
    }
}

/// One discriminator update on real→1 / detached fake→0, then one generator
/// update pushing D(G(z)) toward 1.
pub fn gan_train_step(
    gan: &Gan,
    gen: &mut NetworkParams,
    disc: &mut NetworkParams,
    real: &Tensor,
    opt: &mut GanOptimizers,
    rng: &mut RngStream,
) -> Result<StepLosses> {
    let n = real.shape().first().copied().unwrap_or(0);
    if real.shape() != gan.image_shape(n) || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "gan real batch",
            left: gan.image_shape(n).to_vec(),
            right: real.shape().to_vec(),
        });
    }
    let step_seed = rng.next_u64();

    let z = sample_latent(n, &gan.config, rng)?;
    let fake = {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, gen, Mode::Train).frozen();
        gan.generator.forward(&ctx, tape.constant(z))?.value()
    };
    let targets = Tensor::new([2 * n, 1], (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect())?;
    let (d_loss, d_grads) = {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, disc, Mode::Train).with_rng(RngStream::derive(step_seed, &[0]));
        let scores = gan.discriminator.forward(&ctx, tape.constant(concat(real, &fake)?))?;
        let loss = binary_cross_entropy(scores, &targets)?;
        let value = finite(f64::from(loss.value().item()?), "discriminator loss")?;
        (value, tape.backward(loss)?.into_named())
    };
    adam_step(disc, &d_grads, &mut opt.disc)?;

    let z = sample_latent(n, &gan.config, rng)?;
    let (g_loss, g_grads, stats) = {
        let tape = Tape::new();
        let gctx = ForwardCtx::new(&tape, gen, Mode::Train);
        let images = gan.generator.forward(&gctx, tape.constant(z))?;
        let dctx = ForwardCtx::new(&tape, disc, Mode::Train).frozen().with_rng(RngStream::derive(step_seed, &[1]));
        let scores = gan.discriminator.forward(&dctx, images)?;
        let loss = binary_cross_entropy(scores, &Tensor::ones([n, 1]))?;
        let value = finite(f64::from(loss.value().item()?), "generator loss")?;
        (value, tape.backward(loss)?.into_named(), gctx.take_stat_updates())
    };
    adam_step(gen, &g_grads, &mut opt.gen)?;
    gen.apply(stats)?;
    Ok(StepLosses { d_loss, g_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: StepLosses,
}

pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub gen: &'a NetworkParams,
    pub disc: &'a NetworkParams,
    /// Mean losses over the epoch.
    pub mean: StepLosses,
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub gen: NetworkParams,
    pub disc: NetworkParams,
    pub steps: Vec<StepRecord>,
}

fn stack_batch(images: &[NormalizedImage], picks: &[usize]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = picks.iter().map(|&i| images[i].to_tensor()).collect();
    Tensor::stack(&tensors)
}

/// Trains from fresh weights. Each step draws its real batch uniformly with
/// replacement from `images`; `on_epoch` runs after every epoch.
pub fn train_gan(
    gan: &Gan,
    images: &[NormalizedImage],
    mut on_epoch: impl FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<GanOutcome> {
    let c = &gan.config;
    if images.is_empty() {
        return Err(Error::Data("GAN training set is empty".into()));
    }
    if let Some(img) = images.iter().find(|i| i.width() != c.image_size || i.height() != c.image_size) {
        return Err(Error::Data(format!(
            "GAN images must be {0}x{0}, got {1}x{2}",
            c.image_size,
            img.width(),
            img.height()
        )));
    }
    let (mut gen, mut disc) = gan.init();
    let mut opt = GanOptimizers::new(c);
    let mut steps = Vec::with_capacity(c.epochs * c.steps_per_epoch);
    for epoch in 0..c.epochs {
        let (mut d_sum, mut g_sum) = (0.0, 0.0);
        for step in 0..c.steps_per_epoch {
            let mut rng = RngStream::derive(c.seed, &[0x6A17, epoch as u64, step as u64]);
            let picks: Vec<usize> = (0..c.batch_size).map(|_| rng.index(images.len())).collect();
            let real = stack_batch(images, &picks)?;
            let losses = gan_train_step(gan, &mut gen, &mut disc, &real, &mut opt, &mut rng).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {epoch} step {step}")),
                e => e,
            })?;
            d_sum += losses.d_loss;
            g_sum += losses.g_loss;
            steps.push(StepRecord { epoch, step, losses });
        }
        let k = c.steps_per_epoch as f64;
        on_epoch(&EpochEnd {
            epoch,
            gen: &gen,
            disc: &disc,
            mean: StepLosses { d_loss: d_sum / k, g_loss: g_sum / k },
        })?;
    }
    Ok(GanOutcome { gen, disc, steps })
}

/// `n` eval-mode samples; the latent batch comes from `seed` alone.
pub fn generate_images(gan: &Gan, gen: &NetworkParams, n: usize, seed: u64) -> Result<Vec<NormalizedImage>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let z = sample_latent(n, &gan.config, &mut RngStream::derive(seed, &[0x5A3B]))?;
    let out = gan.generate(gen, &z)?;
    (0..n).map(|i| NormalizedImage::from_tensor(&out.slice_outer(i)?)).collect()
}

/// Normalized histogram of every sample over `bins` equal bins on [−1, 1];
/// 1.0 falls in the last bin.
pub fn intensity_distribution(images: &[NormalizedImage], bins: usize) -> Result<Vec<f64>> {
    if images.is_empty() || bins == 0 {
        return Err(Error::invalid("intensity_distribution needs images and at least one bin"));
    }
    let mut counts = vec![0u64; bins];
    for v in images.iter().flat_map(|img| img.data()) {
        let b = ((f64::from(*v) + 1.0) / 2.0 * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let total = counts.iter().sum::<u64>() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Jensen–Shannon divergence in bits.
pub fn distribution_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!("histograms have {} and {} bins", p.len(), q.len())));
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0))
}

pub fn write_histogram_csv(real: &[f64], fake: &[f64], path: &Path) -> Result<()> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::invalid("histograms must have the same non-zero number of bins"));
    }
    let bins = real.len() as f64;
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["bin_left", "bin_right", "density_real", "density_fake"]).map_err(err)?;
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        let left = -1.0 + 2.0 * i as f64 / bins;
        let right = -1.0 + 2.0 * (i + 1) as f64 / bins;
        w.write_record([left.to_string(), right.to_string(), r.to_string(), f.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_losses_csv(steps: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "step", "d_loss", "g_loss"]).map_err(err)?;
    for s in steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.losses.d_loss.to_string(),
            s.losses.g_loss.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Both networks, the step counter and running loss means.
#[derive(Clone, Debug, PartialEq)]
pub struct GanCheckpoint {
    pub gen: NetworkParams,
    pub disc: NetworkParams,
    pub step: usize,
    pub mean: StepLosses,
}

const META: [&str; 7] = ["latent_dim", "image_size", "base_channels", "step", "d_loss", "g_loss", "batch_size"];

pub fn save_gan(gan: &Gan, ckpt: &GanCheckpoint, path: &Path) -> Result<()> {
    gan.generator.check_params(&ckpt.gen)?;
    gan.discriminator.check_params(&ckpt.disc)?;
    let c = &gan.config;
    let mut all = NetworkParams::new();
    all.merge_prefixed("gen", &ckpt.gen);
    all.merge_prefixed("disc", &ckpt.disc);
    let values = [
        c.latent_dim as f64,
        c.image_size as f64,
        c.base_channels as f64,
        ckpt.step as f64,
        ckpt.mean.d_loss,
        ckpt.mean.g_loss,
        c.batch_size as f64,
    ];
    for (key, v) in META.iter().zip(values) {
        all.insert(format!("meta.gan.{key}"), Tensor::scalar(v as f32));
    }
    save_params(&all, path)
}

/// Restores the checkpoint; architecture fields of `config` are replaced by
/// the stored ones.
pub fn load_gan(path: &Path, config: GanConfig) -> Result<(Gan, GanCheckpoint)> {
    let all = load_params(path)?;
    let meta = |key: &str| -> Result<f32> {
        all.get(&format!("meta.gan.{key}"))
            .ok()
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| Error::Data(format!("{}: not a GAN checkpoint (no meta.gan.{key})", path.display())))
    };
    let count = |key: &str| -> Result<usize> {
        let v = meta(key)?;
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Data(format!("{}: bad meta.gan.{key} {v}", path.display())))
        }
    };
    let config = GanConfig {
        latent_dim: count("latent_dim")?,
        image_size: count("image_size")?,
        base_channels: count("base_channels")?,
        batch_size: count("batch_size")?,
        ..config
    };
    let gan = Gan::new(config)?;
    let gen = all.sub_network("gen");
    let disc = all.sub_network("disc");
    gan.generator.check_params(&gen)?;
    gan.discriminator.check_params(&disc)?;
    let step = meta("step")? as usize;
    let mean = StepLosses { d_loss: f64::from(meta("d_loss")?), g_loss: f64::from(meta("g_loss")?) };
    Ok((gan, GanCheckpoint { gen, disc, step, mean }))
}

use std::time::Instant;

use rayon::prelude::*;

use crate::augment::{augment, params_for, AugmentConfig};
use crate::classifier::{predict_class, Classifier, DrClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::imageproc::{
    load_image, normalize_pm1, preprocess_chain, resize, to_grayscale, NormalizedImage, PreprocessConfig,
};
use crate::layers::{ForwardCtx, Mode};
use crate::optim::{adam_step, categorical_cross_entropy, lr_schedule, AdamState, EarlyStopState, StopDecision};
use crate::params::NetworkParams;
use crate::tensor::{RngStream, Tape, Tensor};

use super::history::{EpochRecord, TrainHistory};
use super::metrics::ConfusionMatrix;
use super::split::{SplitAssignment, Subset};
use super::DatasetManifest;

/// In-memory images with labels, kept in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<NormalizedImage>,
    pub labels: Vec<DrClass>,
}

impl LabeledImages {
    pub fn push(&mut self, image: NormalizedImage, label: DrClass) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        self.labels.iter().for_each(|l| counts[l.index()] += 1);
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `[n, 1, h, w]` batch of the listed images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        stack_images(indices.iter().map(|&i| &self.images[i]))
    }
}

fn stack_images<'a>(images: impl Iterator<Item = &'a NormalizedImage>) -> Result<Tensor> {
    let tensors: Vec<Tensor> = images.map(|img| img.to_tensor()).collect();
    Tensor::stack(&tensors)
}

fn one_hot(labels: impl Iterator<Item = DrClass>) -> Tensor {
    let labels: Vec<DrClass> = labels.collect();
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    labels.iter().enumerate().for_each(|(i, l)| data[i * NUM_CLASSES + l.index()] = 1.0);
    Tensor::new([labels.len(), NUM_CLASSES], data).expect("consistent shape")
}

/// How files become network inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageLoader {
    /// The full fundus chain.
    Preprocess(PreprocessConfig),
    /// Grayscale, resize and normalize only; for already prepared images.
    Plain { size: usize },
}

impl ImageLoader {
    pub fn size(&self) -> usize {
        match self {
            ImageLoader::Preprocess(c) => c.size,
            ImageLoader::Plain { size } => *size,
        }
    }

    pub fn load(&self, path: &std::path::Path) -> Result<NormalizedImage> {
        let img = load_image(path)?;
        match self {
            ImageLoader::Preprocess(config) => preprocess_chain(&img, config),
            ImageLoader::Plain { size } => {
                let gray = to_grayscale(&img)?;
                if gray.width() == *size && gray.height() == *size {
                    normalize_pm1(&gray)
                } else {
                    normalize_pm1(&resize(&gray, *size, *size)?)
                }
            }
        }
    }
}

/// Loads the listed records in parallel; the result keeps `indices` order.
pub fn load_records(manifest: &DatasetManifest, indices: &[usize], loader: &ImageLoader) -> Result<LabeledImages> {
    let images = indices
        .par_iter()
        .map(|&i| loader.load(&manifest.full_path(&manifest.records()[i])))
        .collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| manifest.records()[i].label).collect();
    Ok(LabeledImages { images, labels })
}

pub fn load_subset(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    subset: Subset,
    loader: &ImageLoader,
) -> Result<LabeledImages> {
    load_records(manifest, &split.indices(subset), loader)
}

/// Synthetic images needed per class to lift every minority class to
/// `fraction` of the largest class.
pub fn injection_counts(counts: [usize; NUM_CLASSES], fraction: f64) -> [usize; NUM_CLASSES] {
    let target = (fraction * counts.iter().copied().max().unwrap_or(0) as f64).ceil() as usize;
    counts.map(|c| target.saturating_sub(c))
}

/// Appends generated images for the classes with a nonzero count. `generate`
/// is called once per such class.
pub fn inject_synthetic(
    train: &mut LabeledImages,
    counts: [usize; NUM_CLASSES],
    mut generate: impl FnMut(DrClass, usize) -> Result<Vec<NormalizedImage>>,
) -> Result<()> {
    for c in DrClass::ALL {
        let n = counts[c.index()];
        if n == 0 {
            continue;
        }
        let images = generate(c, n)?;
        if images.len() != n {
            return Err(Error::invalid(format!("generator returned {} images for {c}, wanted {n}", images.len())));
        }
        images.into_iter().for_each(|img| train.push(img, c));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub patience: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.001,
            beta1: 0.9,
            patience: 15,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(format!(
                "need epochs >= 1 and batch_size >= 2, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!("bad learning_rate {} or beta1 {}", self.learning_rate, self.beta1)));
        }
        self.augment.validate()
    }
}

pub type ValLossHook<'a> = Box<dyn FnMut(usize, f64) -> f64 + 'a>;
pub type EpochHook<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Replaces the validation loss seen by early stopping and the history.
    pub val_loss: Option<ValLossHook<'a>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Consecutive batches of `order`; a trailing batch of one sample is folded
/// into the previous batch since train-mode batch norm needs two.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - 1 - out.last().map_or(0, |b| b.len());
        *out.last_mut().expect("two batches") = &order[start..];
    }
    out
}

/// Mean categorical cross-entropy in eval mode.
pub fn validation_loss(
    model: &Classifier,
    params: &NetworkParams,
    data: &LabeledImages,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, params, Mode::Eval).frozen();
        let probs = model.forward(&ctx, tape.constant(data.batch(batch)?))?;
        let loss = categorical_cross_entropy(probs, &one_hot(batch.iter().map(|&i| data.labels[i])))?;
        total += f64::from(loss.value().item()?) * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn augmented_batch(data: &LabeledImages, batch: &[usize], config: &TrainConfig, epoch: usize) -> Result<Tensor> {
    if config.augment.is_none() {
        return data.batch(batch);
    }
    let images = batch
        .par_iter()
        .map(|&i| augment(&data.images[i], &params_for(&config.augment, config.seed, epoch as u64, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    stack_images(images.iter())
}

/// Mini-batch Adam with per-epoch learning-rate decay, online augmentation
/// and early stopping on the validation loss.
pub fn train_classifier(
    model: &Classifier,
    init: NetworkParams,
    config: &TrainConfig,
    train: &LabeledImages,
    val: &LabeledImages,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_params(&init)?;
    if train.len() < 2 {
        return Err(Error::Data(format!("training set has {} images; at least 2 are needed", train.len())));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut params = init;
    let mut adam = AdamState::new(config.learning_rate, config.beta1);
    let mut stopper = EarlyStopState::new(config.patience);
    let mut history = TrainHistory::default();
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        adam.lr = lr_schedule(config.learning_rate, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::derive(config.seed, &[0x0DE7, epoch as u64]).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (step, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let x = augmented_batch(train, batch, config, epoch)?;
            let y = one_hot(batch.iter().map(|&i| train.labels[i]));
            let tape = Tape::new();
            let (loss, grads, stats) = {
                let rng = RngStream::derive(config.seed, &[0xD409, epoch as u64, step as u64]);
                let ctx = ForwardCtx::new(&tape, &params, Mode::Train).with_rng(rng);
                let probs = model.forward(&ctx, tape.constant(x))?;
                let loss = categorical_cross_entropy(probs, &y)?;
                let value = f64::from(loss.value().item()?);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch} step {step}")));
                }
                (value, tape.backward(loss)?.into_named(), ctx.take_stat_updates())
            };
            adam_step(&mut params, &grads, &mut adam).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {epoch} step {step}")),
                e => e,
            })?;
            params.apply(stats)?;
            loss_sum += loss * batch.len() as f64;
        }

        let mut val_loss = validation_loss(model, &params, val, config.batch_size)?;
        if let Some(hook) = hooks.val_loss.as_mut() {
            val_loss = hook(epoch, val_loss);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr: adam.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(hook) = hooks.on_epoch.as_mut() {
            hook(&record);
        }
        history.push(record);
        if stopper.update(epoch, val_loss, &params)? == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = stopper.best_epoch().expect("at least one epoch ran");
    let best_val_loss = stopper.best_loss();
    let params = stopper.into_best_params().expect("snapshot taken with the best epoch");
    Ok(TrainOutcome { params, history, best_epoch, best_val_loss, stopped_early })
}

/// Eval-mode predictions tallied against the labels.
pub fn evaluate(
    model: &Classifier,
    params: &NetworkParams,
    data: &LabeledImages,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    model.check_params(params)?;
    let mut cm = ConfusionMatrix::new();
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let probs = model.predict(params, &data.batch(batch)?)?;
        for (row, &i) in probs.data().chunks(NUM_CLASSES).zip(batch) {
            cm.record(data.labels[i], predict_class(row)?);
        }
    }
    Ok(cm)
}

/// Fraction of correct predictions.
pub fn accuracy(model: &Classifier, params: &NetworkParams, data: &LabeledImages, batch_size: usize) -> Result<f64> {
    let cm = evaluate(model, params, data, batch_size)?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_classifier, ClassifierConfig};
    use crate::pipeline::synth::{shape_dataset, ShapeStyle, SHAPE_FRACTIONS};

    fn tiny_model() -> ClassifierConfig {
        ClassifierConfig { stem_channels: 4, widths: vec![4], fc: vec![8], input_size: 16 }
    }

    fn tiny_data(n: usize, seed: u64) -> LabeledImages {
        shape_dataset(n, [0.2; 5], ShapeStyle { size: 16, noise: 0.05 }, seed)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, augment: AugmentConfig::none(), seed: 11, ..TrainConfig::default() }
    }

    #[test]
    fn trailing_single_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(b.concat(), order);
        assert_eq!(batches(&order[..8], 4).len(), 2);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn injection_lifts_minorities_to_half_the_majority() {
        assert_eq!(injection_counts([100, 10, 60, 0, 49], 0.5), [0, 40, 0, 50, 1]);
        let mut data = tiny_data(10, 1);
        let counts = injection_counts(data.class_counts(), 2.0);
        let mut calls = Vec::new();
        inject_synthetic(&mut data, counts, |c, n| {
            calls.push(c);
            Ok(vec![NormalizedImage::new(16, 16, vec![0.0; 256])?; n])
        })
        .unwrap();
        assert_eq!(data.class_counts(), [4; 5]);
        assert_eq!(calls.len(), 5);
        assert!(inject_synthetic(&mut data, [1, 0, 0, 0, 0], |_, _| Ok(vec![])).is_err());
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let (model, mut params) = build_classifier(tiny_model(), 1).unwrap();
        let data = tiny_data(50, 2);
        // Zero logits weights and a bias favouring NoDR predict NoDR everywhere.
        params.insert("logits.weight", Tensor::zeros([8, 5]));
        params.insert("logits.bias", Tensor::new([5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let cm = evaluate(&model, &params, &data, 16).unwrap();
        assert_eq!(cm.total(), 50);
        for c in DrClass::ALL {
            assert_eq!(cm.get(c, DrClass::NoDR), 10);
        }
        let mut perfect = ConfusionMatrix::new();
        data.labels.iter().for_each(|&l| perfect.record(l, l));
        assert_eq!(perfect.counts().iter().enumerate().map(|(i, r)| r[i]).sum::<u64>(), 50);
        assert!(evaluate(&model, &params, &LabeledImages::default(), 4).is_err());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let (model, params) = build_classifier(tiny_model(), 3).unwrap();
        let train = tiny_data(60, 4);
        let val = tiny_data(20, 5);
        let run =
            || train_classifier(&model, params.clone(), &quick(4), &train, &val, &mut TrainHooks::default()).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), 4);
        assert!(a.history.epochs[3].train_loss < a.history.epochs[0].train_loss, "{:?}", a.history);
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        assert_eq!(a.params, b.params);
        let restored = validation_loss(&model, &a.params, &val, 8).unwrap();
        assert!((restored - a.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn injected_plateau_stops_early() {
        let (model, params) = build_classifier(tiny_model(), 6).unwrap();
        let train = tiny_data(20, 7);
        let val = tiny_data(10, 8);
        let mut seen = Vec::new();
        let mut hooks = TrainHooks {
            val_loss: Some(Box::new(|epoch, loss| if epoch <= 2 { loss } else { 100.0 + epoch as f64 })),
            on_epoch: Some(Box::new(|r: &EpochRecord| seen.push(r.epoch))),
        };
        let config = TrainConfig { patience: 3, ..quick(50) };
        let out = train_classifier(&model, params, &config, &train, &val, &mut hooks).unwrap();
        drop(hooks);
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), out.best_epoch + 1 + 4);
        assert_eq!(seen.len(), out.history.len());
        let restored = validation_loss(&model, &out.params, &val, 8).unwrap();
        assert!((restored - out.best_val_loss).abs() < 1e-6);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (model, params) = build_classifier(tiny_model(), 1).unwrap();
        let data = tiny_data(10, 1);
        let none = &mut TrainHooks::default();
        assert!(train_classifier(
            &model,
            params.clone(),
            &TrainConfig { batch_size: 1, ..quick(1) },
            &data,
            &data,
            none
        )
        .is_err());
        assert!(train_classifier(&model, params.clone(), &quick(1), &data.subset(&[0]), &data, none).is_err());
        assert!(train_classifier(&model, params, &quick(1), &data, &LabeledImages::default(), none).is_err());
        let _ = SHAPE_FRACTIONS;
    }
}

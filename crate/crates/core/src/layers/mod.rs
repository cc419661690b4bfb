//! Network building blocks shared by the classifier and the DCGAN.
//!
//! Layers are described by [`LayerSpec`] values and carry no weights; weights
//! live in a [`NetworkParams`] and are bound onto a tape through a
//! [`ForwardCtx`] at forward time.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod norm;
pub mod pool;
pub mod residual;

use std::cell::RefCell;
use std::collections::HashMap;

pub use activation::Activation;
pub use conv::ConvSpec;
pub use norm::BatchNormState;
pub use residual::ResidualStageSpec;

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::{Float, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds parameters onto a tape for one forward pass.
pub struct ForwardCtx<'t, 'p, T: Float> {
    tape: &'t Tape<T>,
    params: &'p NetworkParams<T>,
    mode: Mode,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
    overrides: HashMap<String, Var<'t, T>>,
    rng: RefCell<Option<RngStream>>,
    stat_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'t, 'p, T: Float> ForwardCtx<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p NetworkParams<T>, mode: Mode) -> Self {
        ForwardCtx {
            tape,
            params,
            mode,
            trainable: true,
            bound: RefCell::new(HashMap::new()),
            overrides: HashMap::new(),
            rng: RefCell::new(None),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Parameters enter the tape as constants and receive no gradient.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn with_rng(self, rng: RngStream) -> Self {
        *self.rng.borrow_mut() = Some(rng);
        self
    }

    /// Uses `var` in place of the stored parameter `name`.
    pub fn with_override(mut self, name: impl Into<String>, var: Var<'t, T>) -> Self {
        self.overrides.insert(name.into(), var);
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p NetworkParams<T> {
        self.params
    }

    /// The parameter as a tape variable, registered once per pass.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.overrides.get(name) {
            return Ok(*v);
        }
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.params.get(name)?.clone();
        let var = if self.trainable { self.tape.param(name, value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Non-trainable tensor such as a running statistic.
    pub fn buffer(&self, name: &str) -> Result<Tensor<T>> {
        self.params.get(name).cloned()
    }

    pub(crate) fn push_stat_update(&self, name: String, value: Tensor<T>) {
        self.stat_updates.borrow_mut().push((name, value));
    }

    /// Running-statistic updates produced by train-mode batch norms; the
    /// caller decides whether to commit them.
    pub fn take_stat_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    pub(crate) fn with_rng_mut<R>(&self, f: impl FnOnce(&mut RngStream) -> R) -> Result<R> {
        let mut guard = self.rng.borrow_mut();
        let rng = guard.as_mut().ok_or_else(|| Error::invalid("train-mode dropout needs an rng stream"))?;
        Ok(f(rng))
    }
}

/// What a declared parameter is, for initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamDecl {
    pub(crate) fn new(name: String, shape: Vec<usize>, role: ParamRole) -> Self {
        ParamDecl { name, shape, role }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// N(0, sqrt(2 / fan_in)) for relu networks.
    HeNormal,
    /// N(0, std) for every weight; DCGAN uses std 0.02.
    Normal { std: f64 },
}

impl InitScheme {
    pub fn init(self, decls: &[ParamDecl], rng: &mut RngStream) -> NetworkParams<f32> {
        let mut params = NetworkParams::new();
        for d in decls {
            let t = match d.role {
                ParamRole::Weight { fan_in } => {
                    let std = match self {
                        InitScheme::HeNormal => (2.0 / fan_in as f64).sqrt(),
                        InitScheme::Normal { std } => std,
                    };
                    Tensor::from_fn(d.shape.clone(), |_| rng.normal(0.0, std) as f32)
                }
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(d.shape.clone()),
                ParamRole::Gamma | ParamRole::RunningVar => Tensor::ones(d.shape.clone()),
            };
            params.insert(d.name.clone(), t);
        }
        params
    }
}

/// One layer and its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    ConvTranspose2d(ConvSpec),
    BatchNorm {
        channels: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    ZeroPad2d {
        pad: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        rate: f64,
    },
    Activation(Activation),
    ResidualStage(ResidualStageSpec),
    GlobalAvgPool,
    Flatten,
    /// Reshape every sample to the given per-sample shape.
    Reshape(Vec<usize>),
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(format!("{op} expects rank {rank}, got {shape:?}")));
    }
    Ok(())
}

impl LayerSpec {
    /// Output shape for a batched input shape, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv2d(spec) => {
                expect_rank("conv2d", input, 4)?;
                spec.check_in_channels(input[1])?;
                let (h, w) = spec.conv_output(input[2], input[3])?;
                Ok(vec![input[0], spec.out_channels, h, w])
            }
            LayerSpec::ConvTranspose2d(spec) => {
                expect_rank("conv2d_transpose", input, 4)?;
                spec.check_in_channels(input[1])?;
                let (h, w) = spec.transpose_output(input[2], input[3])?;
                Ok(vec![input[0], spec.out_channels, h, w])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.len() < 2 || input[1] != *channels {
                    return Err(Error::shape(format!("batch_norm over {channels} channels got {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool2d { window, stride } => {
                expect_rank("max_pool2d", input, 4)?;
                let (h, w) = pool::pool_output(input[2], input[3], *window, *stride)?;
                Ok(vec![input[0], input[1], h, w])
            }
            LayerSpec::ZeroPad2d { pad } => {
                expect_rank("zero_pad2d", input, 4)?;
                Ok(vec![input[0], input[1], input[2] + 2 * pad, input[3] + 2 * pad])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != 2 || input[1] != *inputs {
                    return Err(Error::shape(format!("dense expects [n, {inputs}], got {input:?}")));
                }
                Ok(vec![input[0], *outputs])
            }
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::ResidualStage(spec) => spec.output_shape(input),
            LayerSpec::GlobalAvgPool => {
                expect_rank("global_avg_pool", input, 4)?;
                Ok(vec![input[0], input[1]])
            }
            LayerSpec::Flatten => {
                let n = *input.first().ok_or_else(|| Error::shape("flatten of rank-0"))?;
                Ok(vec![n, input[1..].iter().product()])
            }
            LayerSpec::Reshape(sample) => {
                let n = *input.first().ok_or_else(|| Error::shape("reshape of rank-0"))?;
                if input[1..].iter().product::<usize>() != sample.iter().product::<usize>() {
                    return Err(Error::ShapeMismatch { op: "reshape", left: input.to_vec(), right: sample.clone() });
                }
                let mut out = vec![n];
                out.extend_from_slice(sample);
                Ok(out)
            }
        }
    }

    /// Parameters this layer owns, named under `prefix`.
    pub fn params(&self, prefix: &str) -> Vec<ParamDecl> {
        match self {
            LayerSpec::Conv2d(spec) => spec.params(prefix, false),
            LayerSpec::ConvTranspose2d(spec) => spec.params(prefix, true),
            LayerSpec::BatchNorm { channels } => norm::params(prefix, *channels),
            LayerSpec::Dense { inputs, outputs } => dense::params(prefix, *inputs, *outputs),
            LayerSpec::ResidualStage(spec) => spec.params(prefix),
            _ => Vec::new(),
        }
    }

    pub fn forward<'t, T: Float>(
        &self,
        ctx: &ForwardCtx<'t, '_, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            LayerSpec::Conv2d(spec) => spec.forward(ctx, prefix, x),
            LayerSpec::ConvTranspose2d(spec) => spec.forward_transpose(ctx, prefix, x),
            LayerSpec::BatchNorm { channels } => norm::batch_norm_layer(ctx, prefix, *channels, x),
            LayerSpec::MaxPool2d { window, stride } => pool::max_pool2d(x, *window, *stride),
            LayerSpec::ZeroPad2d { pad } => pool::zero_pad2d(x, *pad),
            LayerSpec::Dense { .. } => dense::dense_layer(ctx, prefix, x),
            LayerSpec::Dropout { rate } => dropout::dropout_layer(ctx, x, *rate),
            LayerSpec::Activation(kind) => Ok(kind.apply(x)),
            LayerSpec::ResidualStage(spec) => spec.forward(ctx, prefix, x),
            LayerSpec::GlobalAvgPool => pool::global_avg_pool(x),
            LayerSpec::Flatten | LayerSpec::Reshape(_) => {
                let shape = self.output_shape(&x.shape())?;
                x.reshape(&shape)
            }
        }
    }
}

/// Layers applied in order, each owning parameters under its own name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    layers: Vec<(String, LayerSpec)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: LayerSpec) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |shape, (_, layer)| layer.output_shape(&shape))
    }

    /// Input shape followed by the shape after every layer.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut trace = vec![input.to_vec()];
        for (_, layer) in &self.layers {
            let next = layer.output_shape(trace.last().expect("non-empty"))?;
            trace.push(next);
        }
        Ok(trace)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(|(name, l)| l.params(name)).collect()
    }

    pub fn init(&self, scheme: InitScheme, rng: &mut RngStream) -> NetworkParams<f32> {
        scheme.init(&self.params(), rng)
    }

    pub fn forward<'t, T: Float>(&self, ctx: &ForwardCtx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.layers.iter().try_fold(x, |x, (name, layer)| layer.forward(ctx, name, x))
    }

    /// Checks that `params` holds exactly the declared names and shapes.
    pub fn check_params<T: Float>(&self, params: &NetworkParams<T>) -> Result<()> {
        let decls = self.params();
        for d in &decls {
            let t = params.get(&d.name)?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::ShapeMismatch { op: "parameter", left: d.shape.clone(), right: t.shape().to_vec() });
            }
        }
        if decls.len() != params.len() {
            return Err(Error::invalid(format!("expected {} parameters, found {}", decls.len(), params.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer_strategy(channels: usize) -> impl Strategy<Value = LayerSpec> {
        prop_oneof![
            (1usize..4, 1usize..4, 1usize..3, 0usize..2)
                .prop_map(move |(out, k, s, p)| { LayerSpec::Conv2d(ConvSpec::new(channels, out, k, s, p)) }),
            (1usize..4, 1usize..4, 1usize..3, 0usize..2)
                .prop_map(move |(out, k, s, p)| { LayerSpec::ConvTranspose2d(ConvSpec::new(channels, out, k, s, p)) }),
            Just(LayerSpec::BatchNorm { channels }),
            (1usize..4, 1usize..3).prop_map(|(window, stride)| LayerSpec::MaxPool2d { window, stride }),
            (0usize..3).prop_map(|pad| LayerSpec::ZeroPad2d { pad }),
            Just(LayerSpec::Activation(Activation::LeakyRelu { slope: 0.2 })),
            Just(LayerSpec::Dropout { rate: 0.3 }),
            (1usize..4, 1usize..3).prop_map(move |(out, stride)| {
                LayerSpec::ResidualStage(ResidualStageSpec::new(channels, out, stride))
            }),
            Just(LayerSpec::GlobalAvgPool),
            Just(LayerSpec::Flatten),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn inferred_shapes_match_execution(
            n in 2usize..4,
            c in 1usize..4,
            h in 1usize..9,
            w in 1usize..9,
            layer in (1usize..4).prop_flat_map(layer_strategy),
            seed in 0u64..1000,
        ) {
            let c = match &layer {
                LayerSpec::Conv2d(s) | LayerSpec::ConvTranspose2d(s) => s.in_channels,
                LayerSpec::BatchNorm { channels } => *channels,
                LayerSpec::ResidualStage(s) => s.in_channels,
                _ => c,
            };
            let input = [n, c, h, w];
            let mut net = Sequential::new();
            net.push("l", layer);
            let mut rng = RngStream::new(seed, 0);
            let params = net.init(InitScheme::HeNormal, &mut rng);
            let tape = Tape::<f32>::new();
            let ctx = ForwardCtx::new(&tape, &params, Mode::Train).with_rng(RngStream::new(seed, 1));
            let x = tape.constant(Tensor::from_fn(input, |_| rng.uniform(-1.0, 1.0) as f32));
            match (net.output_shape(&input), net.forward(&ctx, x)) {
                (Ok(shape), Ok(y)) => prop_assert_eq!(shape, y.shape()),
                (Err(_), Err(_)) => {}
                (inferred, run) => prop_assert!(false, "inferred {:?} but ran {:?}", inferred, run.map(|y| y.shape())),
            }
        }
    }
}

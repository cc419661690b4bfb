//! Finite-difference checks over every layer primitive, both losses and the
//! reduced classifier, in `f64`.

use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::Result;
use crate::layers::activation::LEAKY_SLOPE;
use crate::layers::{Activation, ConvSpec, ForwardCtx, InitScheme, LayerSpec, Mode, ResidualStageSpec, Sequential};
use crate::optim::{binary_cross_entropy, categorical_cross_entropy};
use crate::params::{is_buffer, NetworkParams};
use crate::tensor::gradcheck::{grad_check_sampled, weighted_sum, GradCheck, DEFAULT_EPSILON};
use crate::tensor::{RngStream, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
const ENTRIES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    /// `input` or a parameter name.
    pub target: String,
    pub check: GradCheck,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.check.checked > 0 && self.check.max_rel_error < TOLERANCE
    }
}

struct NetCase {
    name: &'static str,
    net: Sequential,
    input: Vec<usize>,
    mode: Mode,
}

fn single(name: &'static str, layer: LayerSpec, input: &[usize], mode: Mode) -> NetCase {
    let mut net = Sequential::new();
    net.push("layer", layer);
    NetCase { name, net, input: input.to_vec(), mode }
}

fn net_cases() -> Vec<NetCase> {
    use Activation::*;
    vec![
        single("dense", LayerSpec::Dense { inputs: 6, outputs: 4 }, &[3, 6], Mode::Train),
        single("conv2d", LayerSpec::Conv2d(ConvSpec::new(2, 3, 3, 2, 1)), &[2, 2, 7, 7], Mode::Train),
        single(
            "conv2d_transpose",
            LayerSpec::ConvTranspose2d(ConvSpec::new(3, 2, 4, 2, 1)),
            &[2, 3, 4, 4],
            Mode::Train,
        ),
        single("batch_norm_train", LayerSpec::BatchNorm { channels: 3 }, &[4, 3, 3, 3], Mode::Train),
        single("batch_norm_eval", LayerSpec::BatchNorm { channels: 3 }, &[2, 3, 3, 3], Mode::Eval),
        single("batch_norm_dense", LayerSpec::BatchNorm { channels: 5 }, &[6, 5], Mode::Train),
        single("max_pool2d", LayerSpec::MaxPool2d { window: 3, stride: 2 }, &[2, 2, 7, 7], Mode::Train),
        single("zero_pad2d", LayerSpec::ZeroPad2d { pad: 2 }, &[1, 2, 3, 3], Mode::Train),
        single("global_avg_pool", LayerSpec::GlobalAvgPool, &[2, 3, 4, 4], Mode::Train),
        single("flatten", LayerSpec::Flatten, &[2, 2, 3, 3], Mode::Train),
        single("dropout", LayerSpec::Dropout { rate: 0.3 }, &[3, 8], Mode::Train),
        single("relu", LayerSpec::Activation(Relu), &[3, 8], Mode::Train),
        single("leaky_relu", LayerSpec::Activation(LeakyRelu { slope: LEAKY_SLOPE }), &[3, 8], Mode::Train),
        single("tanh", LayerSpec::Activation(Tanh), &[3, 8], Mode::Train),
        single("sigmoid", LayerSpec::Activation(Sigmoid), &[3, 8], Mode::Train),
        single("softmax", LayerSpec::Activation(Softmax), &[3, 5], Mode::Train),
        single("residual_stage", LayerSpec::ResidualStage(ResidualStageSpec::new(3, 4, 2)), &[2, 3, 6, 6], Mode::Train),
    ]
}

/// The classifier shrunk until a full-network check is cheap.
pub fn reduced_classifier() -> ClassifierConfig {
    ClassifierConfig { stem_channels: 4, widths: vec![4, 8], fc: vec![8], input_size: 16 }
}

/// Names of the case groups, in run order.
pub fn case_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = net_cases().iter().map(|c| c.name).collect();
    names.extend(["categorical_cross_entropy", "binary_cross_entropy", "classifier"]);
    names
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(lo, hi))
}

fn randomize_buffers(params: &mut NetworkParams<f64>, rng: &mut RngStream) {
    let names: Vec<String> = params.names().filter(|n| is_buffer(n)).cloned().collect();
    for name in names {
        let shape = params.get(&name).expect("listed").shape().to_vec();
        let (lo, hi) = if name.ends_with(".running_var") { (0.5, 2.0) } else { (-0.5, 0.5) };
        params.insert(name, random(&shape, lo, hi, rng));
    }
}

trait Probe {
    fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_, f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>>;
}

struct NetProbe<'a> {
    net: &'a Sequential,
    proj: Tensor<f64>,
}

impl Probe for NetProbe<'_> {
    fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_, f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        weighted_sum(self.net.forward(ctx, x)?, &self.proj)
    }
}

fn ctx_for<'t, 'p>(
    tape: &'t Tape<f64>,
    params: &'p NetworkParams<f64>,
    mode: Mode,
    seed: u64,
) -> ForwardCtx<'t, 'p, f64> {
    ForwardCtx::new(tape, params, mode).with_rng(RngStream::new(seed, 0xD7))
}

/// Input gradient plus the listed parameters, or all trainable ones.
#[allow(clippy::too_many_arguments)]
fn check_network(
    case: &str,
    seed: u64,
    probe: &dyn Probe,
    params: &NetworkParams<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    only: Option<&[&str]>,
    rng: &mut RngStream,
) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let check = grad_check_sampled(
        |v| probe.forward(&ctx_for(v.tape(), params, mode, seed), v),
        x,
        DEFAULT_EPSILON,
        ENTRIES,
        rng,
    )?;
    out.push(CaseResult { case: case.into(), seed, target: "input".into(), check });
    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => params.trainable().map(|(n, _)| n.clone()).collect(),
    };
    for name in names {
        let w = params.get(&name)?.clone();
        let check = grad_check_sampled(
            |v| {
                let ctx = ctx_for(v.tape(), params, mode, seed).with_override(name.clone(), v);
                probe.forward(&ctx, v.tape().constant(x.clone()))
            },
            &w,
            DEFAULT_EPSILON,
            ENTRIES,
            rng,
        )?;
        out.push(CaseResult { case: case.into(), seed, target: name, check });
    }
    Ok(out)
}

fn net_case(case: &NetCase, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = RngStream::derive(seed, &[0x6C, case.name.len() as u64]);
    let mut params = case.net.init(InitScheme::HeNormal, &mut rng).cast::<f64>();
    // Non-trivial affine parameters so their gradients are exercised.
    let names: Vec<String> = params.trainable().map(|(n, _)| n.clone()).collect();
    for name in names.iter().filter(|n| n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with(".bias")) {
        let shape = params.get(name)?.shape().to_vec();
        params.insert(name.clone(), random(&shape, 0.5, 1.5, &mut rng));
    }
    randomize_buffers(&mut params, &mut rng);
    let x = random(&case.input, -1.0, 1.0, &mut rng);
    let out_shape = case.net.output_shape(&case.input)?;
    let probe = NetProbe { net: &case.net, proj: random(&out_shape, -1.0, 1.0, &mut rng) };
    // A conv bias directly followed by train-mode batch norm has an exactly
    // zero gradient; there is nothing to compare.
    let targets: Vec<&str> = params
        .trainable()
        .map(|(n, _)| n.as_str())
        .filter(|n| !(case.name == "residual_stage" && n.contains("conv") && n.ends_with(".bias")))
        .collect();
    check_network(case.name, seed, &probe, &params, &x, case.mode, Some(&targets), &mut rng)
}

fn loss_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = RngStream::derive(seed, &[0x1055]);
    let logits = random(&[4, 5], -2.0, 2.0, &mut rng);
    let onehot = Tensor::from_fn([4, 5], |i| if i % 5 == (i / 5 + 1) % 5 { 1.0 } else { 0.0 });
    let cce = grad_check_sampled(
        |v| categorical_cross_entropy(Activation::Softmax.apply(v), &onehot),
        &logits,
        DEFAULT_EPSILON,
        20,
        &mut rng,
    )?;
    let pre = random(&[6, 1], -2.0, 2.0, &mut rng);
    let targets = Tensor::from_fn([6, 1], |i| (i % 2) as f64);
    let bce = grad_check_sampled(
        |v| binary_cross_entropy(Activation::Sigmoid.apply(v), &targets),
        &pre,
        DEFAULT_EPSILON,
        6,
        &mut rng,
    )?;
    Ok(vec![
        CaseResult { case: "categorical_cross_entropy".into(), seed, target: "input".into(), check: cce },
        CaseResult { case: "binary_cross_entropy".into(), seed, target: "input".into(), check: bce },
    ])
}

fn classifier_case(seed: u64) -> Result<Vec<CaseResult>> {
    let model = Classifier::new(reduced_classifier())?;
    let mut rng = RngStream::derive(seed, &[0xC1A5]);
    let params = model.init_params(&mut rng).cast::<f64>();
    let x = random(&model.input_shape(2), -1.0, 1.0, &mut rng);
    let proj = random(&[2, 5], -1.0, 1.0, &mut rng);
    let only = [
        "stem.conv.weight",
        "stem.bn.gamma",
        "stage0.block0.conv1.weight",
        "stage0.block2.bn2.beta",
        "stage1.block0.shortcut.conv.weight",
        "stage1.block1.conv2.weight",
        "fc0.weight",
        "logits.weight",
        "logits.bias",
    ];
    let probe = NetProbe { net: model.network(), proj };
    check_network("classifier", seed, &probe, &params, &x, Mode::Train, Some(&only), &mut rng)
}

/// Runs every case for seeds `0..seeds`, reporting each result as it lands.
pub fn run_gradient_suite(seeds: u64, mut report: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut all = Vec::new();
    let mut push = |results: Vec<CaseResult>| {
        results.iter().for_each(&mut report);
        all.extend(results);
    };
    let cases = net_cases();
    for seed in 0..seeds {
        for case in &cases {
            push(net_case(case, seed)?);
        }
        push(loss_cases(seed)?);
        push(classifier_case(seed)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes_everywhere() {
        let results = run_gradient_suite(1, |_| {}).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        for name in case_names() {
            assert!(results.iter().any(|r| r.case == name), "{name}");
        }
    }
}

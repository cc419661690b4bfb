//! Residual stage: one convolutional block followed by two identity blocks.
//!
//! Each block runs conv3x3 → BN → relu → conv3x3 → BN on its residual
//! branch, adds the shortcut, then applies relu. The convolutional block's
//! shortcut is a 1x1 conv + BN projection (carrying the stride and channel
//! change); identity blocks add their input unchanged.

use super::activation::relu;
use super::norm;
use super::{ConvSpec, ForwardCtx, ParamDecl};
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// Identity blocks per stage, after the convolutional block.
pub const IDENTITY_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualStageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stride of the convolutional block; 2 halves the spatial size.
    pub stride: usize,
}

struct BlockSpec {
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    projection: bool,
}

impl BlockSpec {
    fn conv1(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels, 3, self.stride, 1)
    }

    fn conv2(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, 3, 1, 1)
    }

    fn shortcut(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels, 1, self.stride, 0)
    }

    fn params(&self, p: &str) -> Vec<ParamDecl> {
        let mut decls = self.conv1().params(&format!("{p}.conv1"), false);
        decls.extend(norm::params(&format!("{p}.bn1"), self.out_channels));
        decls.extend(self.conv2().params(&format!("{p}.conv2"), false));
        decls.extend(norm::params(&format!("{p}.bn2"), self.out_channels));
        if self.projection {
            decls.extend(self.shortcut().params(&format!("{p}.shortcut.conv"), false));
            decls.extend(norm::params(&format!("{p}.shortcut.bn"), self.out_channels));
        }
        decls
    }

    fn forward<'t, T: Float>(&self, ctx: &ForwardCtx<'t, '_, T>, p: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1().forward(ctx, &format!("{p}.conv1"), x)?;
        let h = relu(norm::batch_norm_layer(ctx, &format!("{p}.bn1"), self.out_channels, h)?);
        let h = self.conv2().forward(ctx, &format!("{p}.conv2"), h)?;
        let h = norm::batch_norm_layer(ctx, &format!("{p}.bn2"), self.out_channels, h)?;
        let shortcut = if self.projection {
            let s = self.shortcut().forward(ctx, &format!("{p}.shortcut.conv"), x)?;
            norm::batch_norm_layer(ctx, &format!("{p}.shortcut.bn"), self.out_channels, s)?
        } else {
            x
        };
        Ok(relu(h.add(shortcut)?))
    }
}

impl ResidualStageSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResidualStageSpec { in_channels, out_channels, stride }
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut blocks = vec![BlockSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            projection: true,
        }];
        for _ in 0..IDENTITY_BLOCKS {
            blocks.push(BlockSpec {
                in_channels: self.out_channels,
                out_channels: self.out_channels,
                stride: 1,
                projection: false,
            });
        }
        blocks
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::shape(format!("residual stage expects [n, c, h, w], got {input:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape(format!("residual stage expects {} channels, got {c}", self.in_channels)));
        }
        let conv = ConvSpec::new(self.in_channels, self.out_channels, 3, self.stride, 1);
        let (oh, ow) = conv.conv_output(h, w)?;
        Ok(vec![n, self.out_channels, oh, ow])
    }

    pub(crate) fn params(&self, prefix: &str) -> Vec<ParamDecl> {
        self.blocks().iter().enumerate().flat_map(|(i, b)| b.params(&format!("{prefix}.block{i}"))).collect()
    }

    pub fn forward<'t, T: Float>(
        &self,
        ctx: &ForwardCtx<'t, '_, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.output_shape(&x.shape())?;
        self.blocks().iter().enumerate().try_fold(x, |x, (i, b)| b.forward(ctx, &format!("{prefix}.block{i}"), x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{InitScheme, LayerSpec, Mode, Sequential};
    use crate::params::NetworkParams;
    use crate::tensor::gradcheck::{grad_check_sampled, weighted_sum};
    use crate::tensor::{RngStream, Tape, Tensor};

    fn stage_net(spec: ResidualStageSpec) -> Sequential {
        let mut net = Sequential::new();
        net.push("stage", LayerSpec::ResidualStage(spec));
        net
    }

    #[test]
    fn conv_block_halves_spatial_dims() {
        let spec = ResidualStageSpec::new(64, 128, 2);
        assert_eq!(spec.output_shape(&[1, 64, 56, 56]).unwrap(), vec![1, 128, 28, 28]);
        assert!(spec.output_shape(&[1, 32, 56, 56]).is_err());
    }

    #[test]
    fn zeroed_branch_gives_identity_on_nonnegative_input() {
        let spec = ResidualStageSpec::new(3, 3, 1);
        let net = stage_net(spec);
        let mut rng = RngStream::new(61, 0);
        let mut params = net.init(InitScheme::HeNormal, &mut rng).cast::<f64>();
        params.insert("stage.block1.bn2.gamma", Tensor::zeros([3]));
        let x = Tensor::from_fn([1, 3, 5, 5], |_| rng.uniform(0.0, 2.0));

        // Run only the first identity block by extracting its parameters.
        let block = BlockSpec { in_channels: 3, out_channels: 3, stride: 1, projection: false };
        let tape = Tape::<f64>::new();
        let ctx = ForwardCtx::new(&tape, &params, Mode::Eval);
        let y = block.forward(&ctx, "stage.block1", tape.constant(x.clone())).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn missing_parameter_is_reported() {
        let net = stage_net(ResidualStageSpec::new(2, 4, 2));
        let params = NetworkParams::<f64>::new();
        let tape = Tape::<f64>::new();
        let ctx = ForwardCtx::new(&tape, &params, Mode::Eval);
        let err = net.forward(&ctx, tape.constant(Tensor::ones([2, 2, 8, 8]))).unwrap_err();
        assert!(err.to_string().contains("missing parameter"), "{err}");
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        let spec = ResidualStageSpec::new(4, 6, 2);
        let net = stage_net(spec);
        for seed in 0..10 {
            let mut rng = RngStream::new(62, seed);
            let params = net.init(InitScheme::HeNormal, &mut rng).cast::<f64>();
            let x = Tensor::from_fn([2, 4, 8, 8], |_| rng.uniform(-1.0, 1.0));
            let proj = Tensor::from_fn([2, 6, 4, 4], |_| rng.uniform(-1.0, 1.0));

            let r = grad_check_sampled(
                |v| {
                    let ctx = ForwardCtx::new(v.tape(), &params, Mode::Train);
                    weighted_sum(net.forward(&ctx, v)?, &proj)
                },
                &x,
                1e-5,
                40,
                &mut rng,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "input {r:?}");

            for name in ["stage.block0.conv1.weight", "stage.block0.shortcut.conv.weight", "stage.block2.bn2.gamma"] {
                let w = params.get(name).unwrap().clone();
                let r = grad_check_sampled(
                    |v| {
                        let ctx = ForwardCtx::new(v.tape(), &params, Mode::Train).with_override(name, v);
                        weighted_sum(net.forward(&ctx, v.tape().constant(x.clone()))?, &proj)
                    },
                    &w,
                    1e-5,
                    20,
                    &mut rng,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{name} {r:?}");
            }
        }
    }
}

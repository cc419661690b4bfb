use super::{ForwardCtx, ParamDecl, ParamRole};
use crate::error::Result;
use crate::tensor::ops::add_row_bias;
use crate::tensor::{Float, Var};

pub(crate) fn params(prefix: &str, inputs: usize, outputs: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.weight"), vec![inputs, outputs], ParamRole::Weight { fan_in: inputs }),
        ParamDecl::new(format!("{prefix}.bias"), vec![outputs], ParamRole::Bias),
    ]
}

/// `x·W + b` with `W` stored as `[inputs, outputs]`.
pub(crate) fn dense_layer<'t, T: Float>(
    ctx: &ForwardCtx<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    add_row_bias(x.matmul(w)?, b)
}

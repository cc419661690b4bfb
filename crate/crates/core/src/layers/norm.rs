use super::{ForwardCtx, Mode, ParamDecl, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Float, Tensor, Var};

/// Batch-norm constants: running = momentum·running + (1 − momentum)·batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormState {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormState {
    fn default() -> Self {
        BatchNormState { momentum: 0.9, epsilon: 1e-5 }
    }
}

impl BatchNormState {
    pub fn blend<T: Float>(&self, running: &Tensor<T>, batch: &Tensor<T>) -> Tensor<T> {
        let m = T::of(self.momentum);
        let data = running.data().iter().zip(batch.data()).map(|(&r, &b)| m * r + (T::one() - m) * b).collect();
        Tensor::from_parts(running.shape().to_vec(), data)
    }
}

pub(crate) fn params(prefix: &str, channels: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.gamma"), vec![channels], ParamRole::Gamma),
        ParamDecl::new(format!("{prefix}.beta"), vec![channels], ParamRole::Beta),
        ParamDecl::new(format!("{prefix}.running_mean"), vec![channels], ParamRole::RunningMean),
        ParamDecl::new(format!("{prefix}.running_var"), vec![channels], ParamRole::RunningVar),
    ]
}

/// Batch norm with parameters bound from `ctx`. In train mode the blended
/// running statistics are queued on `ctx` instead of written in place.
pub(crate) fn batch_norm_layer<'t, T: Float>(
    ctx: &ForwardCtx<'t, '_, T>,
    prefix: &str,
    channels: usize,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::shape(format!("batch_norm over {channels} channels got {shape:?}")));
    }
    let state = BatchNormState::default();
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    match ctx.mode() {
        Mode::Train => {
            let (y, mean, var) = batch_norm_train(x, gamma, beta, state.epsilon)?;
            let running_mean = ctx.buffer(&mean_name)?;
            let running_var = ctx.buffer(&var_name)?;
            ctx.push_stat_update(mean_name, state.blend(&running_mean, &mean));
            ctx.push_stat_update(var_name, state.blend(&running_var, &var));
            Ok(y)
        }
        Mode::Eval => {
            let mean = ctx.buffer(&mean_name)?;
            let var = ctx.buffer(&var_name)?;
            batch_norm_eval(x, gamma, beta, &mean, &var, state.epsilon)
        }
    }
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let spatial: usize = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

fn check_affine<T: Float>(channels: usize, gamma: &Var<'_, T>, beta: &Var<'_, T>) -> Result<()> {
    for v in [gamma, beta] {
        if v.shape() != [channels] {
            return Err(Error::ShapeMismatch { op: "batch_norm", left: vec![channels], right: v.shape() });
        }
    }
    Ok(())
}

/// Normalizes by batch statistics over (batch, spatial) per channel.
/// Returns the output and the biased batch mean and variance.
pub fn batch_norm_train<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    epsilon: f64,
) -> Result<(Var<'t, T>, Tensor<T>, Tensor<T>)> {
    let xv = x.value();
    if xv.rank() < 2 {
        return Err(Error::shape(format!("batch_norm expects [n, c, ...], got {:?}", xv.shape())));
    }
    let (n, c, spatial) = layout(xv.shape());
    if n < 2 {
        return Err(Error::invalid("batch_norm in train mode needs batch size >= 2"));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm epsilon must be positive"));
    }
    check_affine(c, &gamma, &beta)?;
    let (gv, bv) = (gamma.value(), beta.value());
    let count = T::of((n * spatial) as f64);
    let data = xv.data();

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            mean[ch] += data[base..base + spatial].iter().copied().sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            var[ch] += data[base..base + spatial].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(epsilon)).sqrt()).collect();

    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    let rule = TrainRule { xhat, inv_std, n, c, spatial };
    let y = x.tape().record(&[x, gamma, beta], out, rule);
    Ok((y, Tensor::from_parts(vec![c], mean), Tensor::from_parts(vec![c], var)))
}

struct TrainRule<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    spatial: usize,
}

impl<T: Float> Backward<T> for TrainRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, spatial) = (self.n, self.c, self.spatial);
        let gamma = inputs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let count = T::of((n * spatial) as f64);
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    let scale = gamma[ch] * self.inv_std[ch];
                    let mean_g = dbeta[ch] / count;
                    let mean_gx = dgamma[ch] / count;
                    for i in base..base + spatial {
                        dx[i] = scale * (g[i] - mean_g - self.xhat[i] * mean_gx);
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

/// Normalizes by fixed running statistics.
pub fn batch_norm_eval<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    if xv.rank() < 2 {
        return Err(Error::shape(format!("batch_norm expects [n, c, ...], got {:?}", xv.shape())));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm epsilon must be positive"));
    }
    let (n, c, spatial) = layout(xv.shape());
    check_affine(c, &gamma, &beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape(format!("running statistics must have shape [{c}]")));
    }
    let (gv, bv) = (gamma.value(), beta.value());
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + T::of(epsilon)).sqrt()).collect();
    let mean = running_mean.data().to_vec();
    let data = xv.data();
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            let (scale, shift) = (gv.data()[ch] * inv_std[ch], bv.data()[ch]);
            for i in base..base + spatial {
                out[i] = scale * (data[i] - mean[ch]) + shift;
            }
        }
    }
    let out = Tensor::from_parts(xv.shape().to_vec(), out);
    let rule = EvalRule { mean, inv_std, n, c, spatial };
    Ok(x.tape().record(&[x, gamma, beta], out, rule))
}

struct EvalRule<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    spatial: usize,
}

impl<T: Float> Backward<T> for EvalRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, spatial) = (self.n, self.c, self.spatial);
        let (x, gamma) = (inputs[0].data(), inputs[1].data());
        let mut dx = vec![T::zero(); g.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    dx[i] = g[i] * gamma[ch] * self.inv_std[ch];
                    dgamma[ch] += g[i] * (x[i] - self.mean[ch]) * self.inv_std[ch];
                    dbeta[ch] += g[i];
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

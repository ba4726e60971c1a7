use super::{Ctx, Mode};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free convolution with weight `{name}.weight`.
pub fn conv(ctx: &mut Ctx<'_>, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"))?;
    ctx.g.conv2d(x, w, stride, padding)
}

/// `x · W + b` with `{name}.weight: [in, out]` and `{name}.bias: [out]`.
pub fn linear(ctx: &mut Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let b = ctx.param(&format!("{name}.bias"))?;
    let y = ctx.g.matmul(x, w)?;
    ctx.g.add_bias(y, b)
}

/// Per-channel normalization.
///
/// Training mode normalizes with the statistics of the current batch (for a
/// batch of one this is the per-instance statistic) and queues a running
/// average update; eval mode uses the stored running statistics.
pub fn batch_norm(ctx: &mut Ctx<'_>, name: &str, x: Var) -> Result<Var> {
    let gamma = ctx.param(&format!("{name}.gamma"))?;
    let beta = ctx.param(&format!("{name}.beta"))?;
    let mean_key = format!("{name}.running_mean");
    let var_key = format!("{name}.running_var");
    match ctx.mode {
        Mode::Train => {
            let (y, observed) = ctx.g.batch_norm(x, gamma, beta, None, BN_EPS)?;
            let shape = ctx.g.shape(x).to_vec();
            let count = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let old_mean = ctx.params.get(&mean_key)?.value.data();
            let old_var = ctx.params.get(&var_key)?.value.data();
            let new_mean: Vec<f64> = old_mean
                .iter()
                .zip(&observed.mean)
                .map(|(o, m)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * m)
                .collect();
            let new_var: Vec<f64> = old_var
                .iter()
                .zip(&observed.var)
                .map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * unbias)
                .collect();
            let c = new_mean.len();
            ctx.g.push_buffer_update(mean_key, Tensor::new([c], new_mean)?);
            ctx.g.push_buffer_update(var_key, Tensor::new([c], new_var)?);
            Ok(y)
        }
        Mode::Eval => {
            let stats = BatchStats {
                mean: ctx.params.get(&mean_key)?.value.data().to_vec(),
                var: ctx.params.get(&var_key)?.value.data().to_vec(),
            };
            Ok(ctx.g.batch_norm(x, gamma, beta, Some(&stats), BN_EPS)?.0)
        }
    }
}

/// `y = F(x) + shortcut(x)` where `F = conv→norm→relu→conv→norm`.
///
/// The shortcut is the identity unless channels or stride change, in which
/// case it is a 1×1 strided convolution followed by a norm. The activation
/// after the sum belongs to the enclosing stage, not to the block.
pub fn residual_block(
    ctx: &mut Ctx<'_>,
    name: &str,
    x: Var,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> Result<Var> {
    let shape = ctx.g.shape(x);
    if shape.len() != 4 || shape[1] != in_channels {
        return Err(Error::shape(
            "residual_block",
            format!("{name}: expected {in_channels} input channels, got {shape:?}"),
        ));
    }
    let h = conv(ctx, &format!("{name}.conv1"), x, stride, 1)?;
    let h = batch_norm(ctx, &format!("{name}.bn1"), h)?;
    let h = ctx.g.relu(h)?;
    let h = conv(ctx, &format!("{name}.conv2"), h, 1, 1)?;
    let f = batch_norm(ctx, &format!("{name}.bn2"), h)?;

    let skip = if in_channels != out_channels || stride != 1 {
        let s = conv(ctx, &format!("{name}.proj"), x, stride, 0)?;
        batch_norm(ctx, &format!("{name}.proj_bn"), s)?
    } else {
        x
    };
    ctx.g.add(f, skip)
}

//! Amend-representation head: a drop-in replacement for global pooling.
//!
//! The head runs three blocks on the last backbone feature map `[N, C, H, W]`
//! with `C = s²`:
//!
//! 1. **Feature arrangement** interleaves the channels into one `[N, 1, sH, sW]`
//!    plane. Channel `c` at `(h, w)` lands on `(h·s + c / s, w·s + c % s)`, so
//!    each `s×s` tile holds every channel of one spatial position.
//! 2. **De-albino** multiplies the plane by fixed weights
//!    `(k² − z) / k²`, where `z` counts the zero-padded taps in the receptive
//!    window of the preceding convolution at that spatial position. Positions
//!    whose window never touches padding keep weight 1.
//! 3. The plane is averaged over the `H×W` tiles (one value per channel), and
//!    **affinity sharing** blends each sample with the batch mean,
//!    `f' = λ·f + (1 − λ)·mean(f)` with `λ = sigmoid(θ)`. Eval mode skips
//!    the blend so a sample's output never depends on its batch.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// Initial affinity logit; `sigmoid(3) ≈ 0.95` keeps early training close to eval.
pub const SA_INIT_LOGIT: f64 = 3.0;

/// Receptive window of the convolution feeding the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvStackSpec {
    /// Stride-1 convolution that preserves spatial size (`padding = k / 2`).
    pub fn same(kernel: usize) -> Self {
        ConvStackSpec {
            kernel,
            padding: kernel / 2,
            stride: 1,
        }
    }

    pub fn unpadded(kernel: usize) -> Self {
        ConvStackSpec {
            kernel,
            padding: 0,
            stride: 1,
        }
    }
}

/// `s` such that `s² = channels`.
pub fn grid_side(channels: usize) -> Option<usize> {
    let s = (channels as f64).sqrt().round() as usize;
    (s * s == channels && s > 0).then_some(s)
}

/// A channel-interleaved plane on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ArrangedPlane {
    /// `[N, 1, s·H, s·W]`.
    pub plane: Var,
    pub side: usize,
    pub height: usize,
    pub width: usize,
}

impl ArrangedPlane {
    pub fn channels(&self) -> usize {
        self.side * self.side
    }
}

/// Flat source index in `[N,C,H,W]` for each plane position, plane order.
fn arrangement(n: usize, side: usize, h: usize, w: usize) -> Vec<usize> {
    let c = side * side;
    let (ph, pw) = (side * h, side * w);
    let mut index = Vec::with_capacity(n * ph * pw);
    for b in 0..n {
        for i in 0..ph {
            for j in 0..pw {
                let ch = (i % side) * side + j % side;
                index.push(((b * c + ch) * h + i / side) * w + j / side);
            }
        }
    }
    index
}

pub fn feature_arrange(g: &mut Graph, fmap: Var) -> Result<ArrangedPlane> {
    let s = g.shape(fmap).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("feature_arrange", format!("expected [N,C,H,W], got {s:?}")));
    }
    let side = grid_side(s[1]).ok_or_else(|| {
        Error::shape(
            "feature_arrange",
            format!("channel count {} is not a perfect square", s[1]),
        )
    })?;
    let (n, h, w) = (s[0], s[2], s[3]);
    let plane = g.gather(fmap, arrangement(n, side, h, w), &[n, 1, side * h, side * w])?;
    Ok(ArrangedPlane {
        plane,
        side,
        height: h,
        width: w,
    })
}

/// Undo [`feature_arrange`], giving `[N, s², H, W]`.
pub fn inverse_arrange(g: &mut Graph, p: &ArrangedPlane) -> Result<Var> {
    let n = g.shape(p.plane)[0];
    let (side, h, w) = (p.side, p.height, p.width);
    let c = side * side;
    let pw = side * w;
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = y * side + ch / side;
                    let j = x * side + ch % side;
                    index.push((b * side * h + i) * pw + j);
                }
            }
        }
    }
    g.gather(p.plane, index, &[n, c, h, w])
}

/// Number of taps of the receptive window at output row `i` that fall inside
/// an input of `input_len` rows.
fn valid_taps(i: usize, input_len: usize, spec: &ConvStackSpec) -> usize {
    let start = (i * spec.stride) as isize - spec.padding as isize;
    (0..spec.kernel as isize)
        .filter(|d| {
            let r = start + d;
            r >= 0 && r < input_len as isize
        })
        .count()
}

/// De-albino weights `(k² − z)/k²` over an `height × width` output grid.
pub fn de_albino_grid(height: usize, width: usize, spec: &ConvStackSpec) -> Result<Tensor> {
    if spec.kernel == 0 || spec.stride == 0 || spec.padding >= spec.kernel {
        return Err(Error::shape(
            "de_albino",
            format!("window {spec:?} needs kernel > padding and stride ≥ 1"),
        ));
    }
    let input_len = |out: usize| ((out - 1) * spec.stride + spec.kernel).saturating_sub(2 * spec.padding);
    let (in_h, in_w) = (input_len(height), input_len(width));
    let area = (spec.kernel * spec.kernel) as f64;
    let rows: Vec<usize> = (0..height).map(|i| valid_taps(i, in_h, spec)).collect();
    let cols: Vec<usize> = (0..width).map(|j| valid_taps(j, in_w, spec)).collect();
    Tensor::new(
        [height, width],
        rows.iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r * c) as f64 / area))
            .collect(),
    )
}

/// Weights over the arranged plane: every tile shares its position's weight.
pub fn de_albino_plane(p: &ArrangedPlane, spec: &ConvStackSpec) -> Result<Tensor> {
    let grid = de_albino_grid(p.height, p.width, spec)?;
    let (ph, pw) = (p.side * p.height, p.side * p.width);
    Ok(Tensor::from_fn([ph, pw], |idx| {
        let (i, j) = (idx / pw, idx % pw);
        grid.data()[(i / p.side) * p.width + j / p.side]
    }))
}

pub fn de_albino(g: &mut Graph, p: &ArrangedPlane, spec: &ConvStackSpec) -> Result<ArrangedPlane> {
    let weights = de_albino_plane(p, spec)?;
    let n = g.shape(p.plane)[0];
    let per_sample = weights.data();
    let mut full = Vec::with_capacity(n * per_sample.len());
    for _ in 0..n {
        full.extend_from_slice(per_sample);
    }
    let w = g.constant(Tensor::new(g.shape(p.plane).to_vec(), full)?);
    let plane = g.mul(p.plane, w)?;
    Ok(ArrangedPlane { plane, ..*p })
}

/// Mean over the `H×W` tiles of the plane: `[N, s²]`.
pub fn plane_average(g: &mut Graph, p: &ArrangedPlane) -> Result<Var> {
    let maps = inverse_arrange(g, p)?;
    g.mean_spatial(maps)
}

/// Blend each row with the batch mean in training; identity in eval.
pub fn share_affinity(g: &mut Graph, features: Var, mode: Mode, lambda: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("share_affinity", format!("expected [N,D], got {s:?}")));
    }
    if g.value(lambda).numel() != 1 {
        return Err(Error::shape("share_affinity", "lambda must hold one value"));
    }
    match mode {
        Mode::Eval => Ok(features),
        // a single row is its own batch mean
        Mode::Train if s[0] == 1 => Ok(features),
        Mode::Train => {
            let mean = g.mean_rows(features)?;
            let mean = g.repeat_rows(mean, s[0])?;
            let keep = g.mul(features, lambda)?;
            let rest = g.rsub_scalar(1.0, lambda)?;
            let shared = g.mul(mean, rest)?;
            g.add(keep, shared)
        }
    }
}

pub fn init_params(params: &mut ParamStore, name: &str) {
    params.insert(format!("{name}.sa_logit"), Tensor::new([1], vec![SA_INIT_LOGIT]).expect("shape"), true);
}

/// Current affinity weight `λ` of a head.
pub fn lambda_of(params: &ParamStore, name: &str) -> Result<f64> {
    Ok(sigmoid(params.get(&format!("{name}.sa_logit"))?.value.data()[0]))
}

/// Arrange → de-albino → tile average → affinity sharing.
pub fn arm_forward(ctx: &mut Ctx<'_>, name: &str, fmap: Var, window: &ConvStackSpec) -> Result<Var> {
    let plane = feature_arrange(ctx.g, fmap)?;
    let plane = de_albino(ctx.g, &plane, window)?;
    let pooled = plane_average(ctx.g, &plane)?;
    let logit = ctx.param(&format!("{name}.sa_logit"))?;
    let lambda = ctx.g.sigmoid(logit)?;
    share_affinity(ctx.g, pooled, ctx.mode, lambda)
}

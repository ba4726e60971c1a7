//! Action-unit conditioned expression transfer.
//!
//! The generator sees an image concatenated with its target AU vector
//! broadcast over space and returns an attention mask `A` (sigmoid) and a
//! colour image `C` (tanh). The output keeps the input where `A` is one:
//!
//! ```text
//! O = A ⊙ I + (1 − A) ⊙ C
//! ```
//!
//! The discriminator returns a patch realism map and an AU regression.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, Expression, ImageRecord, Origin};
use crate::error::{Error, Result};
use crate::imageio::{load_image, save_image};
use crate::nn::{fan_in_uniform, Ctx, Mode, ParamStore};
use crate::tensor::{read_tensor, write_tensor, DType, Graph, Precision, Tensor, UnaryKind, Var};
use crate::train::{adam_step, AdamConfig, AdamState, MetricsReport};

pub const AU_COUNT: usize = 17;
/// Initial attention logit; sigmoid(4) ≈ 0.982 keeps a fresh generator close
/// to the identity.
pub const ATTENTION_BIAS_INIT: f64 = 4.0;
const ATTENTION_WEIGHT_SCALE: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

/// Action-unit magnitudes, clipped to `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AUVector(Vec<f64>);

impl AUVector {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.len() != AU_COUNT {
            return Err(Error::domain(
                "au_vector",
                format!("expected {AU_COUNT} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("au_vector", "non-finite value"));
        }
        Ok(AUVector(values.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    pub fn zeros() -> Self {
        AUVector(vec![0.0; AU_COUNT])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLambdas {
    pub adv: f64,
    pub au: f64,
    pub att: f64,
    pub cyc: f64,
}

impl Default for GanLambdas {
    fn default() -> Self {
        GanLambdas {
            adv: 1.0,
            au: 10.0,
            att: 0.1,
            cyc: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    /// 32 or 64.
    pub resolution: usize,
    /// Base channel count of both networks.
    pub width: usize,
    pub seed: u64,
    pub lambdas: GanLambdas,
    pub lr: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            resolution: 32,
            width: 8,
            seed: 0,
            lambdas: GanLambdas::default(),
            lr: 1e-4,
            adam: AdamConfig {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_size: 8,
        }
    }
}

impl GanConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if ![32, 64].contains(&self.resolution) {
            v.push(format!("gan.resolution must be 32 or 64, got {}", self.resolution));
        }
        if self.width == 0 {
            v.push("gan.width must be at least 1".to_string());
        }
        let l = self.lambdas;
        for (name, value) in [("adv", l.adv), ("au", l.au), ("att", l.att), ("cyc", l.cyc)] {
            if !(value >= 0.0 && value.is_finite()) {
                v.push(format!("gan.lambda_{name} must be >= 0, got {value}"));
            }
        }
        if !(self.lr > 0.0) {
            v.push(format!("gan.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            v.push("gan.batch_size must be at least 1".to_string());
        }
        v
    }
}

/// `x[n,c,h,w] + b[c]`.
fn channel_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let plane = s[2] * s[3];
    let index = (0..s.iter().product::<usize>()).map(|i| (i / plane) % s[1]).collect();
    let bias = g.gather(b, index, &s)?;
    g.add(x, bias)
}

fn conv_b(ctx: &mut Ctx<'_>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let b = ctx.param(&format!("{name}.bias"))?;
    let y = ctx.g.conv2d(x, w, stride, 1)?;
    channel_bias(ctx.g, y, b)
}

fn init_conv(p: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.weight"), fan_in_uniform(&[out, inp, 3, 3], inp * 9, 6.0, rng), true);
    p.insert(format!("{name}.bias"), Tensor::zeros([out]), true);
}

/// AU vectors broadcast to `[N,17,R,R]` conditioning maps.
pub fn au_maps(aus: &[AUVector], n: usize, resolution: usize) -> Result<Tensor> {
    if aus.len() != n && aus.len() != 1 {
        return Err(Error::shape("au_maps", format!("{} AU vectors for {n} images", aus.len())));
    }
    let plane = resolution * resolution;
    let mut data = Vec::with_capacity(n * AU_COUNT * plane);
    for i in 0..n {
        let au = &aus[if aus.len() == 1 { 0 } else { i }];
        for &v in au.values() {
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Tensor::new([n, AU_COUNT, resolution, resolution], data)
}

pub fn au_matrix(aus: &[AUVector]) -> Result<Tensor> {
    Tensor::new([aus.len(), AU_COUNT], aus.iter().flat_map(|a| a.values().to_vec()).collect())
}

/// Graph nodes of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GenVars {
    pub attention: Var,
    pub color: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOutput {
    pub attention: Tensor,
    pub color: Tensor,
    pub output: Tensor,
}

/// `A ⊙ I + (1 − A) ⊙ C` with a single-channel `A`.
pub fn blend(g: &mut Graph, image: Var, attention: Var, color: Var) -> Result<Var> {
    let channels = g.shape(image)[1];
    let a = g.repeat_channels(attention, channels)?;
    let keep = g.mul(a, image)?;
    let inv = g.rsub_scalar(1.0, a)?;
    let paint = g.mul(inv, color)?;
    g.add(keep, paint)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub resolution: usize,
    pub width: usize,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(resolution: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = width;
        init_conv(&mut p, "gen.enc1", w, 3 + AU_COUNT, &mut rng);
        init_conv(&mut p, "gen.down", 2 * w, w, &mut rng);
        init_conv(&mut p, "gen.mid", 2 * w, 2 * w, &mut rng);
        init_conv(&mut p, "gen.dec", w, 3 * w, &mut rng);
        init_conv(&mut p, "gen.attention", 1, w, &mut rng);
        init_conv(&mut p, "gen.color", 3, w, &mut rng);
        let aw = p.value_mut("gen.attention.weight").expect("registered");
        *aw = aw.map(|v| v * ATTENTION_WEIGHT_SCALE);
        *p.value_mut("gen.attention.bias").expect("registered") = Tensor::full([1], ATTENTION_BIAS_INIT);
        Generator {
            resolution,
            width,
            params: p,
        }
    }

    /// Records one pass. `attention_override` replaces the learned mask with
    /// a constant.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        image: Var,
        aus: &[AUVector],
        attention_override: Option<f64>,
    ) -> Result<GenVars> {
        let s = ctx.g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::shape(
                "generator",
                format!("expected [N,3,{r},{r}], got {s:?}", r = self.resolution),
            ));
        }
        if ctx.g.value(image).data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::domain("generator", "image values must lie in [-1, 1]"));
        }
        let maps = ctx.g.constant(au_maps(aus, s[0], self.resolution)?);
        let x = ctx.g.concat_channels(&[image, maps])?;
        let h1 = conv_b(ctx, "gen.enc1", x, 1)?;
        let h1 = ctx.g.relu(h1)?;
        let h2 = conv_b(ctx, "gen.down", h1, 2)?;
        let h2 = ctx.g.relu(h2)?;
        let h3 = conv_b(ctx, "gen.mid", h2, 1)?;
        let h3 = ctx.g.relu(h3)?;
        let up = ctx.g.upsample2x(h3)?;
        let cat = ctx.g.concat_channels(&[up, h1])?;
        let h4 = conv_b(ctx, "gen.dec", cat, 1)?;
        let h4 = ctx.g.relu(h4)?;

        let attention = match attention_override {
            Some(a) => ctx.g.constant(Tensor::full([s[0], 1, s[2], s[3]], a)),
            None => {
                let a = conv_b(ctx, "gen.attention", h4, 1)?;
                ctx.g.sigmoid(a)?
            }
        };
        let c = conv_b(ctx, "gen.color", h4, 1)?;
        let color = ctx.g.tanh(c)?;
        let output = blend(ctx.g, image, attention, color)?;
        Ok(GenVars {
            attention,
            color,
            output,
        })
    }

    /// Eval pass without recording gradients.
    pub fn generate(&self, image: &Tensor, aus: &[AUVector]) -> Result<GenOutput> {
        self.generate_with(image, aus, None)
    }

    pub fn generate_with(
        &self,
        image: &Tensor,
        aus: &[AUVector],
        attention_override: Option<f64>,
    ) -> Result<GenOutput> {
        let mut g = Graph::new(Precision::Oracle);
        let x = g.constant(image.clone());
        let mut ctx = Ctx::frozen(&mut g, &self.params, Mode::Eval);
        let v = self.forward(&mut ctx, x, aus, attention_override)?;
        Ok(GenOutput {
            attention: g.value(v.attention).clone(),
            color: g.value(v.color).clone(),
            output: g.value(v.output).clone(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub realism: Var,
    pub au: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub resolution: usize,
    pub width: usize,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(resolution: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_conv(&mut p, "disc.conv1", width, 3, &mut rng);
        init_conv(&mut p, "disc.conv2", 2 * width, width, &mut rng);
        init_conv(&mut p, "disc.realism", 1, 2 * width, &mut rng);
        init_conv(&mut p, "disc.au", AU_COUNT, 2 * width, &mut rng);
        Discriminator {
            resolution,
            width,
            params: p,
        }
    }

    /// Side of the square realism map.
    pub fn patch_grid(&self) -> usize {
        self.resolution / 4
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<DiscVars> {
        let s = ctx.g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::shape(
                "discriminator",
                format!("expected [N,3,{r},{r}], got {s:?}", r = self.resolution),
            ));
        }
        let h = conv_b(ctx, "disc.conv1", image, 2)?;
        let h = ctx.g.unary(UnaryKind::LeakyRelu(LEAKY_SLOPE), h)?;
        let h = conv_b(ctx, "disc.conv2", h, 2)?;
        let h = ctx.g.unary(UnaryKind::LeakyRelu(LEAKY_SLOPE), h)?;
        let realism = conv_b(ctx, "disc.realism", h, 1)?;
        let au = conv_b(ctx, "disc.au", h, 1)?;
        let au = ctx.g.mean_spatial(au)?;
        let au = ctx.g.sigmoid(au)?;
        Ok(DiscVars { realism, au })
    }

    /// `(realism [N,1,P,P], au [N,17])` without recording gradients.
    pub fn discriminate(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(Precision::Oracle);
        let x = g.constant(image.clone());
        let mut ctx = Ctx::frozen(&mut g, &self.params, Mode::Eval);
        let v = self.forward(&mut ctx, x)?;
        Ok((g.value(v.realism).clone(), g.value(v.au).clone()))
    }
}

// ---- losses and training --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLossBreakdown {
    pub adversarial: f64,
    pub au_regression: f64,
    pub attention_reg: f64,
    pub cycle: f64,
    pub total: f64,
}

impl GanLossBreakdown {
    pub fn weighted_total(&self, l: &GanLambdas) -> f64 {
        l.adv * self.adversarial + l.au * self.au_regression + l.att * self.attention_reg + l.cyc * self.cycle
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepReport {
    pub discriminator: f64,
    pub generator: GanLossBreakdown,
}

/// Mean of `(x − target)²`.
fn mse_to(g: &mut Graph, x: Var, target: f64) -> Result<Var> {
    let d = g.add_scalar(x, -target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Batch mean of the squared distance between AU rows.
fn au_distance(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let n = target.shape()[0] as f64;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.mul_scalar(s, 1.0 / n)
}

/// Squared total variation plus the mean of the mask.
pub fn attention_regularizer(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (h, w) = (s[2], s[3]);
    let down_a = g.narrow(a, 2, 1, h - 1)?;
    let down_b = g.narrow(a, 2, 0, h - 1)?;
    let dv = g.sub(down_a, down_b)?;
    let right_a = g.narrow(a, 3, 1, w - 1)?;
    let right_b = g.narrow(a, 3, 0, w - 1)?;
    let dh = g.sub(right_a, right_b)?;
    let dv2 = g.mul(dv, dv)?;
    let dh2 = g.mul(dh, dh)?;
    let tv_v = g.mean(dv2)?;
    let tv_h = g.mean(dh2)?;
    let tv = g.add(tv_v, tv_h)?;
    let m = g.mean(a)?;
    g.add(tv, m)
}

/// Records the generator objective and returns the total plus its parts.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    g: &mut Graph,
    gen: &Generator,
    disc: &Discriminator,
    images: Var,
    source: &[AUVector],
    target: &[AUVector],
    lambdas: &GanLambdas,
    trainable: bool,
) -> Result<(Var, [Var; 4])> {
    let fwd = {
        let mut ctx = if trainable {
            Ctx::new(g, &gen.params, Mode::Train)
        } else {
            Ctx::frozen(g, &gen.params, Mode::Train)
        };
        gen.forward(&mut ctx, images, target, None)?
    };
    let d = {
        let mut ctx = Ctx::frozen(g, &disc.params, Mode::Train);
        disc.forward(&mut ctx, fwd.output)?
    };
    let adv = mse_to(g, d.realism, 1.0)?;
    let au = au_distance(g, d.au, &au_matrix(target)?)?;
    let att = attention_regularizer(g, fwd.attention)?;
    let back = {
        let mut ctx = if trainable {
            Ctx::new(g, &gen.params, Mode::Train)
        } else {
            Ctx::frozen(g, &gen.params, Mode::Train)
        };
        gen.forward(&mut ctx, fwd.output, source, None)?
    };
    let diff = g.sub(back.output, images)?;
    let abs = g.abs(diff)?;
    let cyc = g.mean(abs)?;
    let parts = [adv, au, att, cyc];
    let weights = [lambdas.adv, lambdas.au, lambdas.att, lambdas.cyc];
    let mut total = g.mul_scalar(parts[0], weights[0])?;
    for i in 1..4 {
        let t = g.mul_scalar(parts[i], weights[i])?;
        total = g.add(total, t)?;
    }
    Ok((total, parts))
}

/// Least-squares realism on real and generated images plus AU regression
/// on real images.
pub fn discriminator_objective(
    g: &mut Graph,
    disc: &Discriminator,
    real: Var,
    fake: Var,
    source: &[AUVector],
    lambdas: &GanLambdas,
) -> Result<Var> {
    let mut ctx = Ctx::new(g, &disc.params, Mode::Train);
    let dr = disc.forward(&mut ctx, real)?;
    let df = disc.forward(&mut ctx, fake)?;
    let real_term = mse_to(g, dr.realism, 1.0)?;
    let fake_term = mse_to(g, df.realism, 0.0)?;
    let au = au_distance(g, dr.au, &au_matrix(source)?)?;
    let adv = g.add(real_term, fake_term)?;
    let au = g.mul_scalar(au, lambdas.au)?;
    g.add(adv, au)
}

pub struct GanOptimizers {
    pub generator: AdamState,
    pub discriminator: AdamState,
}

impl GanOptimizers {
    pub fn new(adam: AdamConfig) -> Self {
        GanOptimizers {
            generator: AdamState::new(adam),
            discriminator: AdamState::new(adam),
        }
    }
}

/// One discriminator update against a frozen generator followed by one
/// generator update against the updated, frozen discriminator.
#[allow(clippy::too_many_arguments)]
pub fn gan_train_step(
    gen: &mut Generator,
    disc: &mut Discriminator,
    images: &Tensor,
    source: &[AUVector],
    target: &[AUVector],
    opt: &mut GanOptimizers,
    lambdas: &GanLambdas,
    lr: f64,
) -> Result<GanStepReport> {
    let fake = gen.generate(images, target)?.output;
    let mut g = Graph::new(Precision::Oracle);
    let real = g.constant(images.clone());
    let fake = g.constant(fake);
    let d_loss = discriminator_objective(&mut g, disc, real, fake, source, lambdas)?;
    let d_value = g.value(d_loss).data()[0];
    g.backward(d_loss)?;
    adam_step(&mut disc.params, &g.param_grads(), &mut opt.discriminator, lr)?;

    let mut g = Graph::new(Precision::Oracle);
    let x = g.constant(images.clone());
    let (total, parts) = generator_objective(&mut g, gen, disc, x, source, target, lambdas, true)?;
    let value = |v: Var| g.value(v).data()[0];
    let breakdown = GanLossBreakdown {
        adversarial: value(parts[0]),
        au_regression: value(parts[1]),
        attention_reg: value(parts[2]),
        cycle: value(parts[3]),
        total: value(total),
    };
    g.backward(total)?;
    adam_step(&mut gen.params, &g.param_grads(), &mut opt.generator, lr)?;
    Ok(GanStepReport {
        discriminator: d_value,
        generator: breakdown,
    })
}

/// `(image, source AU)` pairs with their pool of AU targets.
pub struct GanData {
    pub images: Vec<Tensor>,
    pub aus: Vec<AUVector>,
}

impl GanData {
    /// Records without an AU vector are skipped.
    pub fn load<'a>(
        corpus: &Corpus,
        records: impl IntoIterator<Item = &'a ImageRecord>,
        resolution: usize,
    ) -> Result<Self> {
        let recs: Vec<&ImageRecord> = records.into_iter().filter(|r| r.au.is_some()).collect();
        let images = recs
            .par_iter()
            .map(|r| load_image(corpus.image_path(r), resolution))
            .collect::<Result<Vec<_>>>()?;
        let aus = recs
            .iter()
            .map(|r| AUVector::new(r.au.as_deref().unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GanData { images, aus })
    }
}

/// Alternating training with seeded batch and target sampling. Targets are
/// drawn from the AU pool of the data itself.
pub fn gan_train(
    gen: &mut Generator,
    disc: &mut Discriminator,
    data: &GanData,
    cfg: &GanConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, &GanStepReport),
) -> Result<Vec<GanStepReport>> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if data.images.is_empty() {
        return Err(Error::Corpus("no images with AU annotations to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = GanOptimizers::new(cfg.adam);
    let mut out = Vec::with_capacity(steps);
    let n = data.images.len();
    for step in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size.min(n)).map(|_| rng.random_range(0..n)).collect();
        let targets: Vec<AUVector> = idx.iter().map(|_| data.aus[rng.random_range(0..n)].clone()).collect();
        let images = Tensor::stack(&idx.iter().map(|&i| data.images[i].clone()).collect::<Vec<_>>())?;
        let source: Vec<AUVector> = idx.iter().map(|&i| data.aus[i].clone()).collect();
        let report = gan_train_step(gen, disc, &images, &source, &targets, &mut opt, &cfg.lambdas, cfg.lr)?;
        on_step(step, &report);
        out.push(report);
    }
    Ok(out)
}

// ---- synthesis ------------------------------------------------------------

/// One reference AU vector per expression class.
pub type ExpressionRefs = BTreeMap<Expression, AUVector>;

fn check_refs(refs: &ExpressionRefs) -> Result<()> {
    let missing: Vec<&str> = Expression::ALL
        .iter()
        .filter(|e| !refs.contains_key(e))
        .map(|e| e.name())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Corpus(format!("missing reference AU for {}", missing.join(", "))))
    }
}

/// Records for 7 generated images per source, in canonical class order,
/// stored under `subdir`.
pub fn plan_synthesis(sources: &[ImageRecord], refs: &ExpressionRefs, subdir: &str) -> Result<Vec<ImageRecord>> {
    check_refs(refs)?;
    let mut out = Vec::with_capacity(7 * sources.len());
    for src in sources {
        for e in Expression::ALL {
            let id = format!("{}-{}", src.id, e.name().to_ascii_lowercase());
            out.push(ImageRecord {
                path: format!("{subdir}/{id}.png"),
                id,
                source_id: src.id.clone(),
                origin: Origin::Generated,
                posture: src.posture,
                label: Some(e),
                landmark_ok: src.landmark_ok,
                au: Some(refs[&e].values().to_vec()),
            });
        }
    }
    Ok(out)
}

/// Renders every planned record with the generator, writing images under
/// the corpus root. Sources are processed in parallel; output depends only
/// on the generator weights and each source image.
pub fn synthesize_corpus(
    gen: &Generator,
    sources: &Corpus,
    refs: &ExpressionRefs,
    subdir: &str,
) -> Result<Vec<ImageRecord>> {
    let collected: Vec<ImageRecord> = sources
        .records()
        .iter()
        .filter(|r| r.origin == Origin::Collected)
        .cloned()
        .collect();
    let plan = plan_synthesis(&collected, refs, subdir)?;
    let targets: Vec<AUVector> = Expression::ALL.iter().map(|e| refs[e].clone()).collect();
    collected.par_iter().enumerate().try_for_each(|(i, src)| -> Result<()> {
        let img = load_image(sources.image_path(src), gen.resolution)?;
        let batch = Tensor::stack(&vec![img; 7])?;
        let out = gen.generate(&batch, &targets)?.output;
        for k in 0..7 {
            let rec = &plan[7 * i + k];
            let one = out.slice_rows(k, 1)?.reshaped([3, gen.resolution, gen.resolution])?;
            save_image(sources.root().join(&rec.path), &one)?;
        }
        Ok(())
    })?;
    Ok(plan)
}

/// Text table: `<expression> <17 values in [0,1]>` per line; `#` comments.
pub fn parse_reference_aus(text: &str) -> Result<ExpressionRefs> {
    let mut refs = ExpressionRefs::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse {
            location: format!("reference AUs line {}", i + 1),
            detail,
        };
        let mut fields = line.split_whitespace();
        let name = fields.next().unwrap_or_default();
        let e: Expression = name.parse().map_err(bad)?;
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|err| bad(format!("`{f}`: {err}"))))
            .collect::<Result<_>>()?;
        if values.len() != AU_COUNT {
            return Err(bad(format!("expected {AU_COUNT} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("value {v} outside [0, 1]")));
        }
        if refs.insert(e, AUVector::new(&values)?).is_some() {
            return Err(bad(format!("{e} listed twice")));
        }
    }
    check_refs(&refs)?;
    Ok(refs)
}

pub fn format_reference_aus(refs: &ExpressionRefs) -> String {
    let mut s = String::new();
    for (e, au) in refs {
        let vals: Vec<String> = au.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{} {}", e.name(), vals.join(" "));
    }
    s
}

// ---- effectiveness --------------------------------------------------------

pub const EFFECTIVENESS_COLUMNS: [&str; 8] =
    ["Surprise", "Fear", "Disgust", "Happy", "Sad", "Angry", "Neutral", "Avg"];

/// One classifier scored on real and generated test images.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectivenessReport {
    pub real: MetricsReport,
    pub generated: MetricsReport,
    /// `|real − generated|` per class, then for the micro average. `None`
    /// where a class is missing from either test set.
    pub gap: [Option<f64>; 8],
}

impl EffectivenessReport {
    pub fn from_reports(real: MetricsReport, generated: MetricsReport) -> Result<Self> {
        if real.total() == 0 || generated.total() == 0 {
            return Err(Error::Report("effectiveness needs two nonempty evaluations".into()));
        }
        let mut gap = [None; 8];
        for (c, slot) in gap.iter_mut().take(7).enumerate() {
            if let (Some(a), Some(b)) = (real.per_class_accuracy[c], generated.per_class_accuracy[c]) {
                *slot = Some((a - b).abs());
            }
        }
        gap[7] = Some((real.micro_average - generated.micro_average).abs());
        Ok(EffectivenessReport { real, generated, gap })
    }

    fn row(m: &MetricsReport) -> Vec<Option<f64>> {
        let mut r = m.per_class_accuracy.to_vec();
        r.push(Some(m.micro_average));
        r
    }

    fn rows(&self) -> [Vec<Option<f64>>; 3] {
        [Self::row(&self.real), Self::row(&self.generated), self.gap.to_vec()]
    }

    /// Missing classes are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = format!("dataset,{}\n", EFFECTIVENESS_COLUMNS.join(","));
        for (name, vals) in ["real", "generated", "gap"].into_iter().zip(self.rows()) {
            let v: Vec<String> = vals.iter().map(|x| x.map(|x| x.to_string()).unwrap_or_default()).collect();
            let _ = writeln!(s, "{name},{}", v.join(","));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut header = vec!["Dataset".to_string()];
        header.extend(EFFECTIVENESS_COLUMNS.iter().map(|s| s.to_string()));
        let mut rows = vec![header];
        for (name, vals) in ["Original", "Generated", "Gap"].into_iter().zip(self.rows()) {
            let mut r = vec![name.to_string()];
            r.extend(vals.iter().map(|v| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())));
            rows.push(r);
        }
        crate::train::aligned(&rows)
    }
}

// ---- checkpoints ----------------------------------------------------------

const GAN_MANIFEST: &str = "manifest.txt";

pub fn save_gan(gen: &Generator, disc: &Discriminator, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut m = format!(
        "model = expression-gan\nresolution = {}\nwidth = {}\n",
        gen.resolution, gen.width
    );
    for p in gen.params.iter().chain(disc.params.iter()) {
        let file = format!("{}.texp", p.name);
        write_tensor(dir.join(&file), &p.value, DType::F64)?;
        let _ = writeln!(m, "param {} {file}", p.name);
    }
    fs::write(dir.join(GAN_MANIFEST), m)?;
    Ok(())
}

pub fn load_gan(dir: impl AsRef<Path>) -> Result<(Generator, Discriminator)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(GAN_MANIFEST))?;
    let setting = |key: &str| {
        crate::nn::checkpoint_setting(&text, key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))
    };
    if setting("model")? != "expression-gan" {
        return Err(Error::Checkpoint("not an expression-gan checkpoint".into()));
    }
    let num = |key: &str| -> Result<usize> {
        setting(key)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad `{key}`: {e}")))
    };
    let (resolution, width) = (num("resolution")?, num("width")?);
    let mut gen = Generator::new(resolution, width, 0);
    let mut disc = Discriminator::new(resolution, width, 0);
    let mut seen = 0;
    for line in text.lines().filter_map(|l| l.strip_prefix("param ")) {
        let Some((name, file)) = line.split_once(' ') else {
            return Err(Error::Checkpoint(format!("malformed param line `{line}`")));
        };
        let (t, _) = read_tensor(dir.join(file.trim()))?;
        let store = if name.starts_with("gen.") { &mut gen.params } else { &mut disc.params };
        let slot = store.value_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has the wrong shape")));
        }
        *slot = t;
        seen += 1;
    }
    if seen != gen.params.len() + disc.params.len() {
        return Err(Error::Checkpoint("checkpoint is missing parameters".into()));
    }
    Ok((gen, disc))
}

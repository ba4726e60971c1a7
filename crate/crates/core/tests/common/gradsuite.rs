//! Seeded finite-difference checks over every differentiable building block.
//!
//! Input gradients go through `gradcheck::check`. Parameter gradients are
//! compared by perturbing entries of a cloned `ParamStore` and re-running the
//! forward pass on a fresh graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terraexpr::arm::{self, ConvStackSpec};
use terraexpr::gan::{discriminator_objective, generator_objective, AUVector, Discriminator, GanLambdas, Generator, AU_COUNT};
use terraexpr::gradcheck::{self, rel_err, STEP};
use terraexpr::loss::{cross_entropy, focal_loss, LossConfig};
use terraexpr::nn::{self, Ctx, Mode, ParamStore};
use terraexpr::tensor::{Graph, PoolKind, Precision, Tensor, Var};
use terraexpr::Result;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub family: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..7)).collect()
}

/// Weighted sum so every output element carries a distinct cotangent.
fn project(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = random(g.shape(y), rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn inputs_case(
    family: &'static str,
    seed: u64,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> CaseResult {
    let r = gradcheck::check(inputs, STEP, f).unwrap_or_else(|e| panic!("{family} seed {seed}: {e}"));
    CaseResult {
        family,
        seed,
        max_rel_err: r.max_rel_err,
        checked: r.checked,
    }
}

/// Checks up to `per_param` random entries of every trainable parameter.
pub fn params_case(
    family: &'static str,
    seed: u64,
    params: &ParamStore,
    per_param: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> CaseResult {
    let fail = |e: terraexpr::Error| -> ! { panic!("{family} seed {seed}: {e}") };
    let mut g = Graph::new(Precision::Oracle);
    let out = f(&mut g, params).unwrap_or_else(|e| fail(e));
    g.backward(out).unwrap_or_else(|e| fail(e));
    let grads = g.param_grads();
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(Precision::Oracle);
        let out = f(&mut g, store).unwrap_or_else(|e| fail(e));
        g.value(out).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in params.iter().filter(|p| p.trainable) {
        let n = p.value.numel();
        let idx: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let analytic = grads.get(&p.name);
        for e in idx {
            let orig = p.value.data()[e];
            probe.value_mut(&p.name).unwrap().data_mut()[e] = orig + STEP;
            let plus = eval(&probe);
            probe.value_mut(&p.name).unwrap().data_mut()[e] = orig - STEP;
            let minus = eval(&probe);
            probe.value_mut(&p.name).unwrap().data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.map(|t| t.data()[e]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    CaseResult {
        family,
        seed,
        max_rel_err: worst,
        checked,
    }
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, t) in entries {
        p.insert(*name, t.clone(), true);
    }
    p
}

pub fn conv(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0)][seed as usize % 4];
    let c = rng.random_range(1..4);
    let f = rng.random_range(1..4);
    let x = random(&[2, c, 5, 5], &mut rng);
    let k = random(&[f, c, 3, 3], &mut rng);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    inputs_case("conv", seed, &[x, k], move |g, v| {
        let y = g.conv2d(v[0], v[1], stride, pad)?;
        project(g, y, &mut wr.clone())
    })
}

pub fn batch_norm(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 2, 3, 3], &mut rng);
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    inputs_case("batch-norm", seed, &[x, gamma, beta], move |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, nn::BN_EPS)?;
        project(g, y, &mut wr.clone())
    })
}

pub fn elementwise(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&[4, 3], &mut rng);
    let b = random(&[4, 3], &mut rng).map(|v| v.abs() + 0.5);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    inputs_case("elementwise", seed, &[a, b], move |g, v| {
        let r = g.relu(v[0])?;
        let s = g.sigmoid(v[0])?;
        let t = g.tanh(v[1])?;
        let l = g.log(v[1])?;
        let e = g.exp(v[0])?;
        let d = g.div(e, v[1])?;
        let m = g.mul(s, t)?;
        let ab = g.abs(v[0])?;
        let p = g.pow_scalar(v[1], 1.7)?;
        let mut acc = g.add(r, m)?;
        for term in [l, d, ab, p] {
            acc = g.add(acc, term)?;
        }
        let acc = g.sub(acc, v[0])?;
        project(g, acc, &mut wr.clone())
    })
}

pub fn pooling(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 2, 6, 6], &mut rng);
    let kind = if seed.is_multiple_of(2) { PoolKind::Max } else { PoolKind::Avg };
    let (k, stride) = [(2, 2), (3, 1), (3, 2)][seed as usize % 3];
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    inputs_case("pooling", seed, &[x], move |g, v| {
        let y = g.pool2d(kind, v[0], k, stride)?;
        let m = g.mean_spatial(v[0])?;
        let a = project(g, y, &mut wr.clone())?;
        let b = project(g, m, &mut wr.clone())?;
        g.add(a, b)
    })
}

pub fn linear(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 5], &mut rng);
    let params = store(&[("fc.weight", random(&[5, 4], &mut rng)), ("fc.bias", random(&[4], &mut rng))]);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    let p2 = params.clone();
    let mut r = inputs_case("linear", seed, std::slice::from_ref(&x), move |g, v| {
        let mut ctx = Ctx::new(g, &p2, Mode::Train);
        let y = nn::linear(&mut ctx, "fc", v[0])?;
        project(g, y, &mut wr.clone())
    });
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    let q = params_case("linear", seed, &params, 32, move |g, p| {
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(g, p, Mode::Train);
        let y = nn::linear(&mut ctx, "fc", xv)?;
        project(g, y, &mut wr.clone())
    });
    r.max_rel_err = r.max_rel_err.max(q.max_rel_err);
    r.checked += q.checked;
    r
}

pub fn softmax(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 7], &mut rng).map(|v| 3.0 * v);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    inputs_case("softmax", seed, &[x], move |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, &mut wr.clone())
    })
}

fn block_params(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let mut conv = |p: &mut ParamStore, name: &str, o: usize, i: usize, k: usize| {
        p.insert(format!("{name}.weight"), random(&[o, i, k, k], rng).map(|v| v * 0.5), true);
    };
    conv(&mut p, "b.conv1", cout, cin, 3);
    conv(&mut p, "b.conv2", cout, cout, 3);
    if cin != cout || stride != 1 {
        conv(&mut p, "b.proj", cout, cin, 1);
    }
    let mut names = vec!["b.bn1", "b.bn2"];
    if cin != cout || stride != 1 {
        names.push("b.proj_bn");
    }
    for bn in names {
        p.insert(format!("{bn}.gamma"), Tensor::full([cout], 1.0).map(|v| v + 0.1), true);
        p.insert(format!("{bn}.beta"), Tensor::full([cout], 0.05), true);
        p.insert(format!("{bn}.running_mean"), Tensor::zeros([cout]), false);
        p.insert(format!("{bn}.running_var"), Tensor::full([cout], 1.0), false);
    }
    p
}

pub fn residual_block(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout, stride) = [(2, 2, 1), (2, 3, 2), (3, 3, 1), (2, 4, 1)][seed as usize % 4];
    let params = block_params(cin, cout, stride, &mut rng);
    let x = random(&[2, cin, 4, 4], &mut rng);
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    let p2 = params.clone();
    let mut r = inputs_case("residual-block", seed, std::slice::from_ref(&x), move |g, v| {
        let mut ctx = Ctx::new(g, &p2, Mode::Train);
        let y = nn::residual_block(&mut ctx, "b", v[0], cin, cout, stride)?;
        project(g, y, &mut wr.clone())
    });
    let wr = ChaCha8Rng::seed_from_u64(seed + 1000);
    let q = params_case("residual-block", seed, &params, 8, move |g, p| {
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(g, p, Mode::Train);
        let y = nn::residual_block(&mut ctx, "b", xv, cin, cout, stride)?;
        project(g, y, &mut wr.clone())
    });
    r.max_rel_err = r.max_rel_err.max(q.max_rel_err);
    r.checked += q.checked;
    r
}

/// Feature map → arrangement → de-albino → average → affinity sharing →
/// classifier → focal loss.
pub fn arm_chain(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [4, 9][seed as usize % 2];
    let n = 2 + seed as usize % 3;
    let fmap = random(&[n, c, 3, 3], &mut rng);
    let mut params = store(&[("fc.weight", random(&[c, 7], &mut rng)), ("fc.bias", random(&[7], &mut rng))]);
    arm::init_params(&mut params, "arm");
    *params.value_mut("arm.sa_logit").unwrap() = Tensor::full([1], rng.random_range(-2.0..2.0));
    let y = labels(n, &mut rng);
    let cfg = LossConfig::focal();
    let window = ConvStackSpec::same(3);
    let chain = move |g: &mut Graph, p: &ParamStore, x: Var| -> Result<Var> {
        let mut ctx = Ctx::new(g, p, Mode::Train);
        let f = arm::arm_forward(&mut ctx, "arm", x, &window)?;
        let logits = nn::linear(&mut ctx, "fc", f)?;
        let probs = g.softmax(logits)?;
        focal_loss(g, probs, &y, &cfg)
    };
    let p2 = params.clone();
    let c2 = chain.clone();
    let mut r = inputs_case("arm-chain", seed, std::slice::from_ref(&fmap), move |g, v| c2(g, &p2, v[0]));
    let q = params_case("arm-chain", seed, &params, 64, move |g, p| {
        let x = g.constant(fmap.clone());
        chain(g, p, x)
    });
    r.max_rel_err = r.max_rel_err.max(q.max_rel_err);
    r.checked += q.checked;
    r
}

pub fn cross_entropy_loss(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + seed as usize % 5;
    let logits = random(&[n, 7], &mut rng).map(|v| 2.0 * v);
    let y = labels(n, &mut rng);
    inputs_case("cross-entropy", seed, &[logits], move |g, v| {
        let p = g.softmax(v[0])?;
        cross_entropy(g, p, &y)
    })
}

pub fn focal(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + seed as usize % 5;
    let logits = random(&[n, 7], &mut rng).map(|v| 2.0 * v);
    let y = labels(n, &mut rng);
    let mut cfg = LossConfig::focal();
    cfg.gamma = [0.0, 0.5, 1.0, 2.0, 5.0][seed as usize % 5];
    cfg.alpha = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
    inputs_case("focal", seed, &[logits], move |g, v| {
        let p = g.softmax(v[0])?;
        focal_loss(g, p, &y, &cfg)
    })
}

/// Zero biases put dead ReLU inputs exactly on the kink; move them off it.
fn jitter_biases(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.iter().filter(|p| p.name.ends_with(".bias")).map(|p| p.name.clone()).collect();
    for name in names {
        for v in params.value_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn gan_batch(rng: &mut ChaCha8Rng, n: usize, res: usize) -> (Tensor, Vec<AUVector>, Vec<AUVector>) {
    let images = Tensor::from_fn([n, 3, res, res], |_| rng.random_range(-0.9..0.9));
    let mut au = || {
        let v: Vec<f64> = (0..AU_COUNT).map(|_| rng.random_range(0.0..1.0)).collect();
        AUVector::new(&v).unwrap()
    };
    let source = (0..n).map(|_| au()).collect();
    let target = (0..n).map(|_| au()).collect();
    (images, source, target)
}

pub fn gan_generator(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = 8;
    let mut gen = Generator::new(res, 2, seed);
    let mut disc = Discriminator::new(res, 2, seed + 1);
    jitter_biases(&mut gen.params, &mut rng);
    jitter_biases(&mut disc.params, &mut rng);
    let (images, source, target) = gan_batch(&mut rng, 2, res);
    let lambdas = GanLambdas::default();
    params_case("gan-generator", seed, &gen.params.clone(), 6, move |g, p| {
        let gen = Generator {
            params: p.clone(),
            ..gen.clone()
        };
        let x = g.constant(images.clone());
        Ok(generator_objective(g, &gen, &disc, x, &source, &target, &lambdas, true)?.0)
    })
}

pub fn gan_discriminator(seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = 8;
    let mut gen = Generator::new(res, 2, seed);
    let mut disc = Discriminator::new(res, 2, seed + 1);
    jitter_biases(&mut gen.params, &mut rng);
    jitter_biases(&mut disc.params, &mut rng);
    let (images, source, target) = gan_batch(&mut rng, 2, res);
    let fake = gen.generate(&images, &target).unwrap().output;
    let lambdas = GanLambdas::default();
    params_case("gan-discriminator", seed, &disc.params.clone(), 8, move |g, p| {
        let disc = Discriminator {
            params: p.clone(),
            ..disc.clone()
        };
        let real = g.constant(images.clone());
        let fake = g.constant(fake.clone());
        discriminator_objective(g, &disc, real, fake, &source, &lambdas)
    })
}

pub type Family = (&'static str, fn(u64) -> CaseResult, u64);

/// Every family with its number of seeds.
pub const FAMILIES: &[Family] = &[
    ("conv", conv, 12),
    ("batch-norm", batch_norm, 10),
    ("elementwise", elementwise, 8),
    ("pooling", pooling, 12),
    ("linear", linear, 8),
    ("softmax", softmax, 6),
    ("residual-block", residual_block, 8),
    ("arm-chain", arm_chain, 12),
    ("cross-entropy", cross_entropy_loss, 10),
    ("focal", focal, 15),
    ("gan-generator", gan_generator, 4),
    ("gan-discriminator", gan_discriminator, 4),
];

pub fn run_family(f: &Family) -> Vec<CaseResult> {
    (0..f.2).map(|s| (f.1)(s)).collect()
}

pub fn run_all() -> Vec<CaseResult> {
    FAMILIES.iter().flat_map(run_family).collect()
}

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{batch_norm, conv, linear, residual_block};
use super::{fan_in_uniform, Ctx, Mode, ParamStore};
use crate::arm::{self, ConvStackSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolKind, Precision, Tensor, Var};

pub const CLASS_COUNT: usize = 7;
const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Classifier head placed after the last residual stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Global average pooling.
    PoolBaseline,
    Arm,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::PoolBaseline => "pool",
            Head::Arm => "arm",
        })
    }
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pool" | "pool-baseline" => Ok(Head::PoolBaseline),
            "arm" => Ok(Head::Arm),
            other => Err(format!("unknown head `{other}` (expected pool|arm)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub width_multiplier: f64,
    pub head: Head,
    /// Seed of the initialization stream.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_resolution: 224,
            input_channels: 3,
            class_count: CLASS_COUNT,
            width_multiplier: 1.0,
            head: Head::Arm,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn toy(head: Head, seed: u64) -> Self {
        NetworkConfig {
            input_resolution: 32,
            width_multiplier: 0.25,
            head,
            seed,
            ..Default::default()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if ![32, 64, 224].contains(&self.input_resolution) {
            v.push(format!(
                "network.resolution = {} (expected 32, 64 or 224)",
                self.input_resolution
            ));
        }
        if self.input_channels != 3 {
            v.push(format!("network.input_channels = {} (expected 3)", self.input_channels));
        }
        if self.class_count != CLASS_COUNT {
            v.push(format!("network.class_count = {} (expected 7)", self.class_count));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            v.push(format!(
                "network.width_multiplier = {} (expected in (0, 1])",
                self.width_multiplier
            ));
        }
        v
    }
}

/// Rounds `base · multiplier` up to a multiple of 4.
pub fn round_channels(base: usize, multiplier: f64) -> usize {
    let scaled = (base as f64 * multiplier).ceil() as usize;
    scaled.max(1).div_ceil(4) * 4
}

/// Channel widths of the four stages. With the ARM head the last width is
/// raised to the next even square so feature arrangement applies.
pub fn stage_widths(cfg: &NetworkConfig) -> [usize; 4] {
    let mut widths = BASE_WIDTHS.map(|b| round_channels(b, cfg.width_multiplier));
    if cfg.head == Head::Arm {
        let mut side = (widths[3] as f64).sqrt().ceil() as usize;
        side += side % 2;
        widths[3] = side * side;
    }
    widths
}

/// Hyperparameters of one layer. Topology is validated from these at build time.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    },
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    GlobalAvgPool,
    ArmHead {
        channels: usize,
        window: ConvStackSpec,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl LayerSpec {
    /// Weighted layers in the classic ResNet depth count; skip projections
    /// are not counted.
    pub fn weighted_layers(&self) -> usize {
        match self {
            LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => 1,
            LayerSpec::ResidualBlock { .. } => 2,
            _ => 0,
        }
    }

    fn output(&self, input: FeatureShape) -> std::result::Result<FeatureShape, String> {
        use FeatureShape::*;
        match (self, input) {
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Map { c, h, w },
            ) => {
                if c != *in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                    return Err(format!("kernel {kernel} larger than padded {h}x{w}"));
                }
                Ok(Map {
                    c: *out_channels,
                    h: (h + 2 * padding - kernel) / stride + 1,
                    w: (w + 2 * padding - kernel) / stride + 1,
                })
            }
            (LayerSpec::BatchNorm { channels }, Map { c, .. }) if c == *channels => Ok(input),
            (LayerSpec::BatchNorm { channels }, _) => Err(format!("batchnorm over {channels} channels")),
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Pool { kernel, stride, .. }, Map { c, h, w }) => {
                if *kernel > h || *kernel > w {
                    return Err(format!("pool window {kernel} larger than {h}x{w}"));
                }
                Ok(Map {
                    c,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                })
            }
            (
                LayerSpec::ResidualBlock {
                    in_channels,
                    out_channels,
                    stride,
                },
                Map { c, h, w },
            ) => {
                if c != *in_channels {
                    return Err(format!("residual block expects {in_channels} channels, got {c}"));
                }
                if h + 2 < 3 || w + 2 < 3 {
                    return Err("residual block input too small".into());
                }
                Ok(Map {
                    c: *out_channels,
                    h: (h - 1) / stride + 1,
                    w: (w - 1) / stride + 1,
                })
            }
            (LayerSpec::GlobalAvgPool, Map { c, .. }) => Ok(Vector(c)),
            (LayerSpec::ArmHead { channels, .. }, Map { c, .. }) => {
                if c != *channels {
                    return Err(format!("arm head expects {channels} channels, got {c}"));
                }
                if arm::grid_side(c).is_none() {
                    return Err(format!("arm head needs a square channel count, got {c}"));
                }
                Ok(Vector(c))
            }
            (
                LayerSpec::Fc {
                    in_features,
                    out_features,
                },
                Vector(d),
            ) => {
                if d != *in_features {
                    return Err(format!("fc expects {in_features} features, got {d}"));
                }
                Ok(Vector(*out_features))
            }
            (spec, shape) => Err(format!("{spec:?} cannot follow {shape:?}")),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding}"
            ),
            LayerSpec::BatchNorm { channels } => write!(f, "batchnorm channels={channels}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Pool {
                kind,
                kernel,
                stride,
            } => {
                let k = match kind {
                    PoolKind::Max => "max",
                    PoolKind::Avg => "avg",
                };
                write!(f, "pool kind={k} kernel={kernel} stride={stride}")
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => write!(
                f,
                "residual-block in={in_channels} out={out_channels} stride={stride}"
            ),
            LayerSpec::GlobalAvgPool => write!(f, "global-avg-pool"),
            LayerSpec::ArmHead { channels, window } => write!(
                f,
                "arm-head channels={channels} da_kernel={} da_padding={} da_stride={}",
                window.kernel, window.padding, window.stride
            ),
            LayerSpec::Fc {
                in_features,
                out_features,
            } => write!(f, "fc in={in_features} out={out_features}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub logits: Var,
    /// Penultimate feature vector (input of the final FC).
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    layers: Vec<Layer>,
    pub params: ParamStore,
}

/// Builds the stem, four stages of two residual blocks, the head and the FC.
pub fn build_resnet18(cfg: &NetworkConfig) -> Result<Network> {
    let errs = cfg.violations();
    if !errs.is_empty() {
        return Err(Error::Network(errs.join("; ")));
    }
    let widths = stage_widths(cfg);
    let mut layers = Vec::new();
    let mut push = |name: String, spec: LayerSpec| layers.push(Layer { name, spec });

    let (stem_k, stem_s, stem_p) = if cfg.input_resolution == 224 {
        (7, 2, 3)
    } else {
        (3, 1, 1)
    };
    push(
        "stem.conv".into(),
        LayerSpec::Conv {
            in_channels: cfg.input_channels,
            out_channels: widths[0],
            kernel: stem_k,
            stride: stem_s,
            padding: stem_p,
        },
    );
    push("stem.bn".into(), LayerSpec::BatchNorm { channels: widths[0] });
    push("stem.relu".into(), LayerSpec::Relu);
    push(
        "stem.pool".into(),
        LayerSpec::Pool {
            kind: PoolKind::Max,
            kernel: 2,
            stride: 2,
        },
    );

    let mut in_c = widths[0];
    for (stage, &out_c) in widths.iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("layer{}.{block}", stage + 1);
            push(
                name.clone(),
                LayerSpec::ResidualBlock {
                    in_channels: in_c,
                    out_channels: out_c,
                    stride,
                },
            );
            push(format!("{name}.relu"), LayerSpec::Relu);
            in_c = out_c;
        }
    }

    match cfg.head {
        Head::PoolBaseline => push("head.gap".into(), LayerSpec::GlobalAvgPool),
        Head::Arm => push(
            "arm".into(),
            LayerSpec::ArmHead {
                channels: in_c,
                window: ConvStackSpec::same(3),
            },
        ),
    }
    push(
        "fc".into(),
        LayerSpec::Fc {
            in_features: in_c,
            out_features: cfg.class_count,
        },
    );

    Network::from_layers(cfg.clone(), layers)
}

impl Network {
    /// Validates the layer sequence and initializes parameters from `cfg.seed`.
    pub fn from_layers(cfg: NetworkConfig, layers: Vec<Layer>) -> Result<Network> {
        let mut shape = FeatureShape::Map {
            c: cfg.input_channels,
            h: cfg.input_resolution,
            w: cfg.input_resolution,
        };
        for layer in &layers {
            shape = layer
                .spec
                .output(shape)
                .map_err(|e| Error::Network(format!("layer `{}`: {e}", layer.name)))?;
        }
        if shape != FeatureShape::Vector(cfg.class_count) {
            return Err(Error::Network(format!(
                "network ends in {shape:?}, expected {} logits",
                cfg.class_count
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        for layer in &layers {
            init_layer(&mut params, &layer.name, &layer.spec, &mut rng);
        }
        Ok(Network {
            cfg,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.weighted_layers()).sum()
    }

    pub fn embedding_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.spec {
                LayerSpec::Fc { in_features, .. } => Some(in_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Per-layer parameter counts, one line each, plus totals.
    pub fn parameter_report(&self) -> String {
        let mut out = String::new();
        let mut total = 0;
        for layer in &self.layers {
            let prefix = format!("{}.", layer.name);
            let n: usize = self
                .params
                .iter()
                .filter(|p| p.trainable && p.name.starts_with(&prefix))
                .map(|p| p.value.numel())
                .sum();
            if n > 0 {
                out.push_str(&format!("{:<14} {:>10}  {}\n", layer.name, n, layer.spec));
            }
            total += n;
        }
        out.push_str(&format!(
            "weighted layers: {}\ntrainable parameters: {total}\n",
            self.weighted_layer_count()
        ));
        out
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<NetOutput> {
        let mut ctx = Ctx::new(g, &self.params, mode);
        self.forward_ctx(&mut ctx, x)
    }

    pub fn forward_ctx(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<NetOutput> {
        let s = ctx.g.shape(x);
        let r = self.cfg.input_resolution;
        if s.len() != 4 || s[1] != self.cfg.input_channels || s[2] != r || s[3] != r {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {s:?} does not match [N,{},{r},{r}]",
                    self.cfg.input_channels
                ),
            ));
        }
        let mut h = x;
        let mut features = x;
        for layer in &self.layers {
            let name = layer.name.as_str();
            h = match &layer.spec {
                LayerSpec::Conv {
                    stride, padding, ..
                } => conv(ctx, name, h, *stride, *padding)?,
                LayerSpec::BatchNorm { .. } => batch_norm(ctx, name, h)?,
                LayerSpec::Relu => ctx.g.relu(h)?,
                LayerSpec::Pool {
                    kind,
                    kernel,
                    stride,
                } => ctx.g.pool2d(*kind, h, *kernel, *stride)?,
                LayerSpec::ResidualBlock {
                    in_channels,
                    out_channels,
                    stride,
                } => residual_block(ctx, name, h, *in_channels, *out_channels, *stride)?,
                LayerSpec::GlobalAvgPool => ctx.g.mean_spatial(h)?,
                LayerSpec::ArmHead { window, .. } => arm::arm_forward(ctx, name, h, window)?,
                LayerSpec::Fc { .. } => {
                    features = h;
                    linear(ctx, name, h)?
                }
            };
        }
        Ok(NetOutput {
            logits: h,
            features,
        })
    }

    /// Eval-mode logits for a batch; records no differentiable path.
    pub fn predict(&self, batch: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut g = Graph::new(precision);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode penultimate features for a batch.
    pub fn embed(&self, batch: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut g = Graph::new(precision);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(out.features).clone())
    }

    /// Applies running-statistic updates queued during a training forward.
    pub fn absorb(&mut self, g: &mut Graph) -> Result<()> {
        self.params.apply_buffer_updates(g.take_buffer_updates())
    }
}

fn init_conv(params: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) {
    let w = fan_in_uniform(&[out_c, in_c, k, k], in_c * k * k, 6.0, rng);
    params.insert(format!("{name}.weight"), w, true);
}

fn init_bn(params: &mut ParamStore, name: &str, c: usize) {
    params.insert(format!("{name}.gamma"), Tensor::ones([c]), true);
    params.insert(format!("{name}.beta"), Tensor::zeros([c]), true);
    params.insert(format!("{name}.running_mean"), Tensor::zeros([c]), false);
    params.insert(format!("{name}.running_var"), Tensor::ones([c]), false);
}

fn init_layer(params: &mut ParamStore, name: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng) {
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => init_conv(params, name, out_channels, in_channels, kernel, rng),
        LayerSpec::BatchNorm { channels } => init_bn(params, name, channels),
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
        } => {
            init_conv(params, &format!("{name}.conv1"), out_channels, in_channels, 3, rng);
            init_bn(params, &format!("{name}.bn1"), out_channels);
            init_conv(params, &format!("{name}.conv2"), out_channels, out_channels, 3, rng);
            init_bn(params, &format!("{name}.bn2"), out_channels);
            if in_channels != out_channels || stride != 1 {
                init_conv(params, &format!("{name}.proj"), out_channels, in_channels, 1, rng);
                init_bn(params, &format!("{name}.proj_bn"), out_channels);
            }
        }
        LayerSpec::ArmHead { .. } => arm::init_params(params, name),
        LayerSpec::Fc {
            in_features,
            out_features,
        } => {
            let w = fan_in_uniform(&[in_features, out_features], in_features, 1.0, rng);
            let b = fan_in_uniform(&[out_features], in_features, 1.0, rng);
            params.insert(format!("{name}.weight"), w, true);
            params.insert(format!("{name}.bias"), b, true);
        }
        LayerSpec::Relu | LayerSpec::Pool { .. } | LayerSpec::GlobalAvgPool => {}
    }
}

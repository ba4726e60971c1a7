//! Subcommand bodies. Each returns the one-line summary printed on success.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use terraexpr::config::RunConfig;
use terraexpr::corpus::{
    self, class_counts_by_posture, ingest, Corpus, Expression, ImageRecord, IngestOptions, Origin,
    Partition, SplitSpec,
};
use terraexpr::gan::{
    self, gan_train, load_gan, parse_reference_aus, save_gan, synthesize_corpus, Discriminator,
    EffectivenessReport, ExpressionRefs, GanData, Generator, AUVector,
};
use terraexpr::nn::{build_resnet18, load_network, save_network, CHECKPOINT_MANIFEST};
use terraexpr::synthetic;
use terraexpr::train::{
    self, aligned, embed_dataset, history_csv, similarity_report, write_text, Dataset,
    DistributionReport, MetricsReport, CLASS_NAMES,
};

/// Failure reported as `error kind=<kind>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "usage",
            message: message.into(),
        }
    }

    /// Single line, suitable for log scraping.
    pub fn line(&self) -> String {
        let msg = self.message.trim().replace('\n', "; ");
        format!("error kind={}: {msg}", self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<terraexpr::Error> for CliError {
    fn from(e: terraexpr::Error) -> Self {
        let message = match &e {
            terraexpr::Error::Config(v) => format!("invalid configuration: {}", v.join("; ")),
            other => other.to_string(),
        };
        CliError {
            kind: e.kind(),
            message,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: "io",
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// The `model` value of a checkpoint that predicts the ground truth.
pub const PERFECT_STUB: &str = "perfect-stub";

/// Loads and validates a configuration and creates its output directory.
pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(path).map_err(|e| match e {
        terraexpr::Error::Io(io) => CliError {
            kind: "io",
            message: format!("{}: {io}", path.display()),
        },
        other => other.into(),
    })?;
    fs::create_dir_all(&cfg.output)?;
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig, verify_images: bool) -> CliResult<Corpus> {
    Ok(ingest(cfg.manifest_path(), IngestOptions { verify_images })?)
}

pub fn default_split_path(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("split.tsv")
}

fn read_split(cfg: &RunConfig, path: Option<&Path>) -> CliResult<SplitSpec> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| default_split_path(cfg));
    if !path.exists() {
        return Err(CliError::usage(format!(
            "split file {} not found; run `terraexpr split` first",
            path.display()
        )));
    }
    Ok(SplitSpec::read(&path)?)
}

fn origin_matches(r: &ImageRecord, origin: Option<Origin>) -> bool {
    origin.is_none_or(|o| r.origin == o)
}

// ---- toy ------------------------------------------------------------------

/// Writes a seeded synthetic corpus, reference AUs and a matching config.
pub fn toy(out: &Path, per_class: usize, seed: u64) -> CliResult<String> {
    if per_class == 0 {
        return Err(CliError::usage("--per-class must be at least 1"));
    }
    let corpus_dir = out.join("corpus");
    let records = synthetic::write_corpus(&corpus_dir, per_class, 32, seed)?;
    let refs: ExpressionRefs = Expression::ALL
        .iter()
        .zip(synthetic::reference_aus())
        .map(|(e, au)| Ok((*e, AUVector::new(&au)?)))
        .collect::<terraexpr::Result<_>>()?;
    write_text(out.join("refs.txt"), &gan::format_reference_aus(&refs))?;
    let mut cfg = RunConfig::toy(seed);
    cfg.corpus = PathBuf::from("corpus");
    cfg.output = PathBuf::from("out");
    write_text(out.join("run.conf"), &cfg.to_text())?;
    Ok(format!(
        "toy: {} images in {}, config {}, reference AUs {}",
        records.len(),
        corpus_dir.display(),
        out.join("run.conf").display(),
        out.join("refs.txt").display()
    ))
}

// ---- ingest / split ---------------------------------------------------------

pub fn ingest_cmd(cfg: &RunConfig, verify_images: bool) -> CliResult<String> {
    let corpus = load_corpus(cfg, verify_images)?;
    let by_posture = class_counts_by_posture(corpus.records());
    let mut header = vec!["Posture".to_string()];
    header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    header.push("Total".into());
    let mut rows = vec![header];
    for (p, counts) in &by_posture {
        let mut row = vec![p.to_string()];
        row.extend(counts.iter().map(|c| c.to_string()));
        row.push(counts.iter().sum::<usize>().to_string());
        rows.push(row);
    }
    let all = corpus::class_counts(corpus.records());
    let mut row = vec!["all".to_string()];
    row.extend(all.iter().map(|c| c.to_string()));
    row.push(all.iter().sum::<usize>().to_string());
    rows.push(row);
    let path = cfg.output.join("ingest.txt");
    write_text(&path, &aligned(&rows))?;
    let generated = corpus.records().iter().filter(|r| r.origin == Origin::Generated).count();
    Ok(format!(
        "ingest: {} records ({} collected, {generated} generated) from {}, counts in {}",
        corpus.len(),
        corpus.len() - generated,
        cfg.manifest_path().display(),
        path.display()
    ))
}

pub fn split_cmd(cfg: &RunConfig) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let spec = corpus::split(&corpus, cfg.split.ratios, cfg.split.mode, cfg.seed)?;
    let path = default_split_path(cfg);
    spec.write(&path)?;
    let [tr, va, te] = spec.counts();
    Ok(format!(
        "split: {} mode, train={tr} val={va} test={te}, written to {}",
        cfg.split.mode,
        path.display()
    ))
}

// ---- train / eval -----------------------------------------------------------

pub fn train_cmd(cfg: &RunConfig, split_path: Option<&Path>, quiet: bool) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let spec = read_split(cfg, split_path)?;
    let res = cfg.network.input_resolution;
    let train_set = Dataset::load(&corpus, spec.records(&corpus, Partition::Train), res)?;
    let val_set = Dataset::load(&corpus, spec.records(&corpus, Partition::Val), res)?;
    let net = build_resnet18(&cfg.network)?;
    let epochs = cfg.train.epochs;
    let outcome = train::train(
        net,
        &train_set,
        (!val_set.is_empty()).then_some(&val_set),
        &cfg.train,
        |r| {
            if !quiet {
                let val = r.val_micro.map(|v| format!(" val_micro={v:.4}")).unwrap_or_default();
                eprintln!("epoch {}/{epochs} train_loss={:.6}{val}", r.epoch + 1, r.train_loss);
            }
        },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let model = cfg.output.join("model");
    save_network(&outcome.best, &model, cfg.precision.dtype())?;
    write_text(cfg.output.join("history.csv"), &history_csv(&outcome.history))?;
    let best = match (outcome.best_epoch, outcome.history.iter().filter_map(|r| r.val_micro).reduce(f64::max)) {
        (Some(e), Some(acc)) => format!("best val micro {acc:.4} at epoch {}", e + 1),
        _ => "no validation set".to_string(),
    };
    Ok(format!(
        "train: {} images, {epochs} epochs, {best}, checkpoint {}",
        train_set.len(),
        model.display()
    ))
}

/// Which records an evaluation or report covers.
#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub split: Option<PathBuf>,
    pub partition: Option<Partition>,
    pub origin: Option<Origin>,
}

fn select<'a>(cfg: &RunConfig, corpus: &'a Corpus, sel: &Selection) -> CliResult<Vec<&'a ImageRecord>> {
    let records: Vec<&ImageRecord> = match sel.partition {
        Some(part) => read_split(cfg, sel.split.as_deref())?.records(corpus, part),
        None => corpus.records().iter().collect(),
    };
    Ok(records.into_iter().filter(|r| origin_matches(r, sel.origin)).collect())
}

enum Model {
    Stub,
    Net(terraexpr::nn::Network),
}

fn load_model(dir: &Path) -> CliResult<Model> {
    let manifest = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST)).map_err(|e| CliError {
        kind: "checkpoint",
        message: format!("{}: {e}", dir.display()),
    })?;
    let stub = manifest.lines().any(|l| {
        l.split_once('=')
            .is_some_and(|(k, v)| k.trim() == "model" && v.trim() == PERFECT_STUB)
    });
    if stub {
        Ok(Model::Stub)
    } else {
        Ok(Model::Net(load_network(dir)?))
    }
}

/// Writes a checkpoint whose predictions always equal the ground truth.
pub fn write_perfect_stub(dir: &Path) -> CliResult<()> {
    write_text(dir.join(CHECKPOINT_MANIFEST), &format!("model = {PERFECT_STUB}\n"))?;
    Ok(())
}

/// Predicted class per record.
fn predict(cfg: &RunConfig, model: &Model, corpus: &Corpus, records: &[&ImageRecord]) -> CliResult<Vec<usize>> {
    match model {
        Model::Stub => records
            .iter()
            .map(|r| {
                r.label
                    .map(Expression::code)
                    .ok_or_else(|| CliError::usage(format!("record `{}` has no label", r.id)))
            })
            .collect(),
        Model::Net(net) => {
            let data = Dataset::load(corpus, records.iter().copied(), net.config().input_resolution)?;
            let logits = train::predict_logits(net, &data, cfg.precision)?;
            Ok(train::argmax_rows(&logits))
        }
    }
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, sel: &Selection, name: &str) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let records = select(cfg, &corpus, sel)?;
    if records.is_empty() {
        return Err(CliError::usage("no records selected for evaluation"));
    }
    let model = load_model(checkpoint)?;
    let predicted = predict(cfg, &model, &corpus, &records)?;
    let truth: Vec<usize> = records
        .iter()
        .map(|r| {
            r.label
                .map(Expression::code)
                .ok_or_else(|| CliError::usage(format!("record `{}` has no label", r.id)))
        })
        .collect::<CliResult<_>>()?;
    let report = MetricsReport::from_predictions(&truth, &predicted)?;
    let csv_path = cfg.output.join(format!("{name}.csv"));
    write_text(&csv_path, &report.to_csv()?)?;
    write_text(cfg.output.join(format!("{name}.txt")), &report.to_table(name))?;
    Ok(format!(
        "eval: {} images, micro={:.4} macro={:.4}, report {}",
        records.len(),
        report.micro_average,
        report.macro_average,
        csv_path.display()
    ))
}

// ---- GAN ----------------------------------------------------------------------

pub fn gan_train_cmd(cfg: &RunConfig, steps: usize, split: Option<&Path>, quiet: bool) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let records: Vec<&ImageRecord> = match split {
        Some(p) => read_split(cfg, Some(p))?.records(&corpus, Partition::Train),
        None => corpus.records().iter().collect(),
    };
    let collected = records.into_iter().filter(|r| r.origin == Origin::Collected);
    let data = GanData::load(&corpus, collected, cfg.gan.resolution)?;
    let mut gen = Generator::new(cfg.gan.resolution, cfg.gan.width, cfg.gan.seed);
    let mut disc = Discriminator::new(cfg.gan.resolution, cfg.gan.width, cfg.gan.seed.wrapping_add(1));
    let history = gan_train(&mut gen, &mut disc, &data, &cfg.gan, steps, |i, r| {
        if !quiet && (i + 1) % 10 == 0 {
            eprintln!(
                "step {}/{steps} d={:.6} g={:.6}",
                i + 1,
                r.discriminator,
                r.generator.total
            );
        }
    })?;
    let dir = cfg.output.join("gan");
    save_gan(&gen, &disc, &dir)?;
    let last = history
        .last()
        .map(|r| format!(", final d={:.6} g={:.6}", r.discriminator, r.generator.total))
        .unwrap_or_default();
    Ok(format!(
        "gan-train: {steps} steps on {} images{last}, checkpoint {}",
        data.images.len(),
        dir.display()
    ))
}

/// Renders 7 expressions per collected image and writes a manifest holding
/// the collected and generated records together.
pub fn generate_cmd(cfg: &RunConfig, gan_dir: &Path, refs_path: &Path, subdir: &str, combined: &str) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let (gen, _) = load_gan(gan_dir)?;
    let refs = parse_reference_aus(&fs::read_to_string(refs_path).map_err(|e| CliError {
        kind: "io",
        message: format!("{}: {e}", refs_path.display()),
    })?)?;
    // earlier generated records are replaced, keeping reruns idempotent
    let collected = corpus.filtered(|r| r.origin == Origin::Collected);
    let generated = synthesize_corpus(&gen, &collected, &refs, subdir)?;
    let mut all: Vec<ImageRecord> = collected.records().to_vec();
    all.extend(generated.iter().cloned());
    let merged = Corpus::from_records(corpus.root(), all)?;
    let path = corpus.root().join(combined);
    merged.write_manifest(&path)?;
    Ok(format!(
        "generate: {} images from {} sources under {}, manifest {}",
        generated.len(),
        collected.len(),
        corpus.root().join(subdir).display(),
        path.display()
    ))
}

// ---- reports --------------------------------------------------------------------

fn read_metrics(path: &Path) -> CliResult<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(MetricsReport::from_csv(&text)?)
}

pub fn report_metrics(cfg: &RunConfig, input: &Path) -> CliResult<String> {
    let report = read_metrics(input)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let path = cfg.output.join(format!("{stem}.txt"));
    write_text(&path, &report.to_table(stem))?;
    Ok(format!(
        "report metrics: micro={:.4} macro={:.4}, table {}",
        report.micro_average,
        report.macro_average,
        path.display()
    ))
}

pub fn report_effectiveness(cfg: &RunConfig, real: &Path, generated: &Path) -> CliResult<String> {
    let report = EffectivenessReport::from_reports(read_metrics(real)?, read_metrics(generated)?)?;
    let path = cfg.output.join("effectiveness.csv");
    write_text(&path, &report.to_csv())?;
    write_text(cfg.output.join("effectiveness.txt"), &report.to_table())?;
    Ok(format!(
        "report effectiveness: average gap {:.4}, report {}",
        report.gap[7].unwrap_or(f64::NAN),
        path.display()
    ))
}

/// Posture × class percentages, from predictions when a checkpoint is given
/// and from the stored labels otherwise.
pub fn report_distribution(cfg: &RunConfig, checkpoint: Option<&Path>, sel: &Selection) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let records: Vec<&ImageRecord> = select(cfg, &corpus, sel)?
        .into_iter()
        .filter(|r| r.posture.is_some())
        .collect();
    let classes: Vec<Expression> = match checkpoint {
        Some(dir) => predict(cfg, &load_model(dir)?, &corpus, &records)?
            .into_iter()
            .map(|c| Expression::ALL[c])
            .collect(),
        None => records
            .iter()
            .map(|r| r.label.ok_or_else(|| CliError::usage(format!("record `{}` has no label", r.id))))
            .collect::<CliResult<_>>()?,
    };
    let report = DistributionReport::from_predictions(records.iter().copied().zip(classes))?;
    let path = cfg.output.join("distribution.csv");
    write_text(&path, &report.to_csv()?)?;
    write_text(cfg.output.join("distribution.txt"), &report.to_table())?;
    Ok(format!(
        "report distribution: {} images in {} posture groups, report {}",
        records.len(),
        report.groups.len(),
        path.display()
    ))
}

pub fn report_similarity(cfg: &RunConfig, checkpoint: &Path, sel: &Selection, limit: usize) -> CliResult<String> {
    let corpus = load_corpus(cfg, false)?;
    let records: Vec<&ImageRecord> = select(cfg, &corpus, sel)?.into_iter().take(limit).collect();
    let Model::Net(net) = load_model(checkpoint)? else {
        return Err(CliError::usage("similarity needs a trained network checkpoint"));
    };
    let res = net.config().input_resolution;
    let mut data = Dataset::default();
    for r in &records {
        let img = terraexpr::imageio::load_image(corpus.image_path(r), res)?;
        data.push(r.id.clone(), img, r.label.map(Expression::code).unwrap_or(0));
    }
    let emb = embed_dataset(&net, &data, cfg.precision)?;
    let report = similarity_report(&emb)?;
    let mut csv = String::from("id");
    for id in &data.ids {
        csv.push(',');
        csv.push_str(id);
    }
    csv.push('\n');
    for (id, row) in data.ids.iter().zip(&report.matrix) {
        csv.push_str(id);
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let path = cfg.output.join("similarity.csv");
    write_text(&path, &csv)?;
    Ok(format!(
        "report similarity: {} images, mean pairwise cosine {:.4}, matrix {}",
        data.len(),
        report.mean_pairwise,
        path.display()
    ))
}

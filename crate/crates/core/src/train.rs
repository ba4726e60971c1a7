//! Optimizer, training loop, evaluation metrics and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, Expression, ImageRecord, Posture};
use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::loss::{loss, loss_from_logits, LossConfig};
use crate::nn::{Mode, Network, ParamStore};
use crate::tensor::{Graph, Precision, Tensor};

pub const CLASS_NAMES: [&str; 7] = ["Surprise", "Fear", "Disgust", "Happy", "Sad", "Anger", "Neutral"];

// ---- data -----------------------------------------------------------------

/// Labeled images held in memory, each `[3,R,R]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, image: Tensor, label: usize) {
        self.ids.push(id.into());
        self.images.push(image);
        self.labels.push(label);
    }

    /// Loads labeled records; unlabeled records are an error.
    pub fn load<'a>(
        corpus: &Corpus,
        records: impl IntoIterator<Item = &'a ImageRecord>,
        resolution: usize,
    ) -> Result<Self> {
        let records: Vec<&ImageRecord> = records.into_iter().collect();
        let images = records
            .par_iter()
            .map(|r| load_image(corpus.image_path(r), resolution))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Dataset::default();
        for (r, img) in records.into_iter().zip(images) {
            let label = r
                .label
                .ok_or_else(|| Error::Corpus(format!("record `{}` has no label", r.id)))?;
            out.push(r.id.clone(), img, label.code());
        }
        Ok(out)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    pub fn class_counts(&self) -> [usize; 7] {
        let mut c = [0; 7];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

// ---- optimizer ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected Adam update of one parameter slice.
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(
                "adam",
                format!("`{name}`: {} values, {} gradients", param.len(), grad.len()),
            ));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.max(1) as i32;
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if m.len() != param.len() {
            return Err(Error::shape("adam", format!("state for `{name}` has the wrong size")));
        }
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..param.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step over every trainable parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.begin_step();
    for (name, g) in grads {
        if !params.get(name)?.trainable {
            continue;
        }
        let p = params.value_mut(name)?;
        state.update(name, p.data_mut(), g.data(), lr)?;
    }
    Ok(())
}

// ---- training -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            adam: AdamConfig::default(),
            lr_decay: 0.95,
            epochs: 20,
            loss: LossConfig::default(),
            seed: 0,
            precision: Precision::Oracle,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            v.push(format!("train.lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            v.push(format!("adam betas must be in [0, 1), got {beta1} and {beta2}"));
        }
        if !(eps > 0.0) {
            v.push(format!("adam.eps must be positive, got {eps}"));
        }
        v.extend(self.loss.violations());
        v
    }

    /// Learning rate used during epoch `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_micro: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Snapshot with the best validation micro accuracy (the final network
    /// when there is no validation set).
    pub best: Network,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Mini-batch training with a seeded shuffle per epoch.
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if train_set.is_empty() {
        return Err(Error::Corpus("training partition is empty".into()));
    }
    let mut warnings = Vec::new();
    for (c, n) in train_set.class_counts().iter().enumerate() {
        if *n == 0 {
            warnings.push(format!("class {} has no training images", CLASS_NAMES[c]));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = net.clone();
    let mut best_epoch = None;
    let mut best_val = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let mut g = Graph::new(cfg.precision);
            let xv = g.constant(x);
            let out = net.forward(&mut g, xv, Mode::Train)?;
            let l = loss_from_logits(&mut g, out.logits, &labels, &cfg.loss)?;
            loss_total += g.value(l).data()[0] * chunk.len() as f64;
            g.backward(l)?;
            let grads = g.param_grads();
            net.absorb(&mut g)?;
            adam_step(&mut net.params, &grads, &mut adam, lr)?;
        }
        let train_loss = loss_total / train_set.len() as f64;
        let (val_loss, val_micro) = match val_set {
            Some(vs) if !vs.is_empty() => {
                let logits = predict_logits(&net, vs, cfg.precision)?;
                let report = MetricsReport::from_predictions(&vs.labels, &argmax_rows(&logits))?;
                let vl = logits_loss(&logits, &vs.labels, &cfg.loss, cfg.precision)?;
                (Some(vl), Some(report.micro_average))
            }
            _ => (None, None),
        };
        if let Some(acc) = val_micro {
            if acc > best_val {
                best_val = acc;
                best = net.clone();
                best_epoch = Some(epoch);
            }
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_micro,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    if best_epoch.is_none() {
        best = net.clone();
    }
    Ok(TrainOutcome {
        net,
        best,
        best_epoch,
        history,
        warnings,
    })
}

/// Eval-mode logits for a whole dataset, `[N,7]`, in dataset order.
pub fn predict_logits(net: &Network, data: &Dataset, precision: Precision) -> Result<Tensor> {
    const EVAL_BATCH: usize = 64;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .chunks(EVAL_BATCH)
        .map(|chunk| {
            let (x, _) = data.batch(chunk)?;
            net.predict(&x, precision)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn logits_loss(logits: &Tensor, labels: &[usize], cfg: &LossConfig, precision: Precision) -> Result<f64> {
    let mut g = Graph::new(precision);
    let l = g.constant(logits.clone());
    let p = g.softmax(l)?;
    let v = loss(&mut g, p, labels, cfg)?;
    Ok(g.value(v).data()[0])
}

pub fn evaluate(net: &Network, data: &Dataset, precision: Precision) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Corpus("evaluation partition is empty".into()));
    }
    let logits = predict_logits(net, data, precision)?;
    MetricsReport::from_predictions(&data.labels, &argmax_rows(&logits))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,val_loss,val_micro\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, opt(r.val_loss), opt(r.val_micro));
    }
    s
}

// ---- metrics --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: [[u64; 7]; 7],
    /// `None` for classes absent from the evaluated set.
    pub per_class_accuracy: [Option<f64>; 7],
    pub micro_average: f64,
    /// Mean over the classes that are present.
    pub macro_average: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; 7]; 7]) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Report("confusion matrix is empty".into()));
        }
        let trace: u64 = (0..7).map(|c| confusion[c][c]).sum();
        let per_class_accuracy: [Option<f64>; 7] = std::array::from_fn(|c| {
            let row: u64 = confusion[c].iter().sum();
            (row > 0).then(|| confusion[c][c] as f64 / row as f64)
        });
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let macro_average = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MetricsReport {
            confusion,
            per_class_accuracy,
            micro_average: trace as f64 / total as f64,
            macro_average,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Report(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = [[0u64; 7]; 7];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= 7 {
                return Err(Error::LabelOutOfRange(t));
            }
            if p >= 7 {
                return Err(Error::LabelOutOfRange(p));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Header `row,<classes>,Average`; an accuracy row, a macro row and one
    /// confusion row per true class (ending in the row total).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string()];
        header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        header.push("Average".into());
        w.write_record(&header)?;

        let mut acc = vec!["accuracy".to_string()];
        acc.extend(self.per_class_accuracy.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
        acc.push(self.micro_average.to_string());
        w.write_record(&acc)?;

        let mut mac = vec!["macro".to_string()];
        mac.extend(std::iter::repeat_n(String::new(), 7));
        mac.push(self.macro_average.to_string());
        w.write_record(&mac)?;

        for (c, row) in self.confusion.iter().enumerate() {
            let mut r = vec![format!("true:{}", CLASS_NAMES[c])];
            r.extend(row.iter().map(|n| n.to_string()));
            r.push(row.iter().sum::<u64>().to_string());
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// Rebuilds from the confusion rows and checks the stored summary rows
    /// against the recomputed values.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut expected = vec!["row".to_string()];
        expected.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        expected.push("Average".into());
        if header != expected {
            return Err(Error::Report(format!("unexpected header {header:?}")));
        }
        let mut confusion = [[0u64; 7]; 7];
        let mut seen = [false; 7];
        let mut stored_micro = None;
        let mut stored_macro = None;
        let mut stored_acc: [Option<f64>; 7] = [None; 7];
        let parse_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Report(format!("bad number `{s}`: {e}")))
            }
        };
        for rec in r.records() {
            let rec = rec?;
            let name = rec.get(0).unwrap_or_default();
            match name {
                "accuracy" => {
                    for c in 0..7 {
                        stored_acc[c] = parse_f(&rec[c + 1])?;
                    }
                    stored_micro = parse_f(&rec[8])?;
                }
                "macro" => stored_macro = parse_f(&rec[8])?,
                _ => {
                    let class = name
                        .strip_prefix("true:")
                        .and_then(|n| CLASS_NAMES.iter().position(|c| *c == n))
                        .ok_or_else(|| Error::Report(format!("unknown row `{name}`")))?;
                    for p in 0..7 {
                        confusion[class][p] = rec[p + 1]
                            .parse()
                            .map_err(|e| Error::Report(format!("bad count `{}`: {e}", &rec[p + 1])))?;
                    }
                    seen[class] = true;
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Report("missing confusion rows".into()));
        }
        let report = Self::from_confusion(confusion)?;
        if stored_micro != Some(report.micro_average)
            || stored_macro != Some(report.macro_average)
            || stored_acc != report.per_class_accuracy
        {
            return Err(Error::Report("summary rows disagree with the confusion matrix".into()));
        }
        Ok(report)
    }

    /// Plain-text table in the layout of the accuracy tables: class
    /// columns followed by Average (micro) and a macro line.
    pub fn to_table(&self, title: &str) -> String {
        let mut header = vec!["".to_string()];
        header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        header.push("Average".into());
        let mut row = vec!["Accuracy".to_string()];
        row.extend(
            self.per_class_accuracy
                .iter()
                .map(|a| a.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())),
        );
        row.push(format!("{:.3}", self.micro_average));
        let mut s = format!("{title}\n{}", aligned(&[header, row]));
        let _ = writeln!(s, "Macro average: {:.3}", self.macro_average);
        s
    }
}

/// Left-aligned columns separated by two spaces.
pub fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

// ---- distribution report --------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub groups: BTreeMap<Posture, [usize; 7]>,
}

impl DistributionReport {
    /// Every group must be nonempty.
    pub fn from_counts(groups: BTreeMap<Posture, [usize; 7]>) -> Result<Self> {
        if let Some((p, _)) = groups.iter().find(|(_, c)| c.iter().sum::<usize>() == 0) {
            return Err(Error::Report(format!("posture group `{p}` is empty")));
        }
        Ok(DistributionReport { groups })
    }

    /// Groups `(record, predicted class)` pairs by posture.
    pub fn from_predictions<'a>(
        items: impl IntoIterator<Item = (&'a ImageRecord, Expression)>,
    ) -> Result<Self> {
        let mut groups: BTreeMap<Posture, [usize; 7]> = BTreeMap::new();
        for (r, e) in items {
            let p = r
                .posture
                .ok_or_else(|| Error::Report(format!("record `{}` has no posture", r.id)))?;
            groups.entry(p).or_default()[e.code()] += 1;
        }
        Self::from_counts(groups)
    }

    pub fn size(&self, posture: Posture) -> usize {
        self.groups.get(&posture).map(|c| c.iter().sum()).unwrap_or(0)
    }

    pub fn percent(&self, posture: Posture, class: Expression) -> Option<f64> {
        let c = self.groups.get(&posture)?;
        Some(100.0 * c[class.code()] as f64 / c.iter().sum::<usize>() as f64)
    }

    /// Percentage to one decimal, e.g. `38.9`.
    pub fn percent_text(&self, posture: Posture, class: Expression) -> Option<String> {
        self.percent(posture, class).map(|p| format!("{p:.1}"))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["posture".to_string(), "size".to_string()];
        header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for p in self.groups.keys() {
            let mut row = vec![p.to_string(), self.size(*p).to_string()];
            row.extend(Expression::ALL.iter().map(|e| self.percent_text(*p, *e).unwrap_or_default()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut header = vec!["Posture".to_string(), "N".to_string()];
        header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        let mut rows = vec![header];
        for p in self.groups.keys() {
            let mut row = vec![p.to_string(), self.size(*p).to_string()];
            row.extend(
                Expression::ALL
                    .iter()
                    .map(|e| format!("{}%", self.percent_text(*p, *e).unwrap_or_default())),
            );
            rows.push(row);
        }
        aligned(&rows)
    }
}

// ---- similarity -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub matrix: Vec<Vec<f64>>,
    /// Mean over off-diagonal pairs.
    pub mean_pairwise: f64,
}

/// Cosine similarity between the rows of an `[N,D]` embedding matrix. A
/// zero row has similarity 0 with every other row.
pub fn similarity_report(embeddings: &Tensor) -> Result<SimilarityReport> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Report(format!(
            "similarity needs at least two embeddings, got shape {s:?}"
        )));
    }
    let (n, d) = (s[0], s[1]);
    let rows: Vec<&[f64]> = embeddings.data().chunks(d).collect();
    let sq_norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).collect();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            // sqrt(|a|²|b|²) is exact for identical rows, so duplicates score 1
            let denom = (sq_norms[i] * sq_norms[j]).sqrt();
            let sim = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
            matrix[i][j] = sim;
            matrix[j][i] = sim;
            total += 2.0 * sim;
        }
    }
    Ok(SimilarityReport {
        matrix,
        mean_pairwise: total / (n * (n - 1)) as f64,
    })
}

/// Embeds every image with the network's penultimate features.
pub fn embed_dataset(net: &Network, data: &Dataset, precision: Precision) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .chunks(64)
        .map(|chunk| {
            let (x, _) = data.batch(chunk)?;
            net.embed(&x, precision)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [3.0, -0.02, 1e-3] {
            let mut st = AdamState::new(AdamConfig::default());
            st.begin_step();
            let mut x = [0.5];
            st.update("x", &mut x, &[g], 0.01).unwrap();
            let expected = 0.5 - 0.01 * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((x[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_ignores_zero_gradient_from_fresh_state() {
        let mut st = AdamState::new(AdamConfig::default());
        st.begin_step();
        let mut x = [1.25, -3.0];
        st.update("x", &mut x, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(x, [1.25, -3.0]);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut x = [1.0];
        let mut prev = 1.0;
        for _ in 0..10 {
            st.begin_step();
            let g = [2.0 * x[0]];
            st.update("x", &mut x, &g, 0.05).unwrap();
            assert!(x[0] * x[0] < prev);
            prev = x[0] * x[0];
        }
    }

    #[test]
    fn micro_and_macro_worked_example() {
        let mut truth = vec![0; 10];
        truth.extend([1, 1]);
        let mut pred = vec![0; 9];
        pred.extend([1, 1, 0]);
        let r = MetricsReport::from_predictions(&truth, &pred).unwrap();
        assert_eq!(r.micro_average, 10.0 / 12.0);
        assert_eq!(r.macro_average, (0.9 + 0.5) / 2.0);
        assert_eq!(r.per_class_accuracy[2], None);
    }

    #[test]
    fn csv_round_trip() {
        let truth: Vec<usize> = (0..50).map(|i| i % 7).collect();
        let pred: Vec<usize> = (0..50).map(|i| (i * 3) % 7).collect();
        let r = MetricsReport::from_predictions(&truth, &pred).unwrap();
        assert_eq!(MetricsReport::from_csv(&r.to_csv().unwrap()).unwrap(), r);
        let tampered = r.to_csv().unwrap().replacen("accuracy,", "accuracy,0.5", 1);
        assert!(MetricsReport::from_csv(&tampered).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new([2, 3], vec![1.0, 5.0, 5.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), [1, 0]);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(3), 1e-4 * 0.95f64.powi(3));
    }

    #[test]
    fn similarity_basics() {
        let e = Tensor::new([3, 2], vec![1.0, 2.0, 1.0, 2.0, -2.0, 1.0]).unwrap();
        let r = similarity_report(&e).unwrap();
        assert_eq!(r.matrix[0][1], 1.0);
        assert_eq!(r.matrix[0][2], 0.0);
        assert!((r.mean_pairwise - 1.0 / 3.0).abs() < 1e-15);
        assert!(similarity_report(&Tensor::zeros([1, 2])).is_err());
    }
}

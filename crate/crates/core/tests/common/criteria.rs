//! One check per acceptance criterion. Each returns whether it held plus a
//! short account of what was measured.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terraexpr::arm::{self, de_albino_grid, feature_arrange, inverse_arrange, share_affinity, ConvStackSpec};
use terraexpr::corpus::{
    aggregate_annotations, ingest, split, AnnotationRecord, Corpus, Expression, ImageRecord, IngestOptions,
    Origin, Partition, Posture, SplitMode, SplitSpec, TiePolicy, DEFAULT_RATIOS,
};
use terraexpr::gan::{synthesize_corpus, AUVector, EffectivenessReport, ExpressionRefs, Generator};
use terraexpr::loss::{cross_entropy, focal_loss, LossConfig};
use terraexpr::nn::{self, build_resnet18, Ctx, Head, Mode, NetworkConfig, ParamStore};
use terraexpr::synthetic::{reference_aus, write_corpus};
use terraexpr::tensor::{Graph, Precision, Tensor};
use terraexpr::train::{evaluate, train, Dataset, DistributionReport, EpochRecord, MetricsReport, TrainConfig};

use super::gradsuite;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gradsuite::random(shape, &mut rng)
}

// ---- gradients -------------------------------------------------------------

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradsuite::run_all();
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("cases");
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_rel_err < gradsuite::TOLERANCE) || r.checked == 0)
        .map(|r| format!("{}#{}", r.family, r.seed))
        .collect();
    let families: BTreeSet<&str> = results.iter().map(|r| r.family).collect();
    let pass = failing.is_empty() && results.len() >= 100 && elapsed.as_secs_f64() < 120.0;
    Outcome::new(
        pass,
        format!(
            "{} cases over {} families, {} derivatives, worst rel err {:.2e} ({}#{}), {:.1}s{}",
            results.len(),
            families.len(),
            results.iter().map(|r| r.checked).sum::<usize>(),
            worst.max_rel_err,
            worst.family,
            worst.seed,
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    )
}

// ---- losses ----------------------------------------------------------------

/// Loss of one sample whose true class has probability `p`; cross-entropy
/// when `focal` is `None`.
fn single_loss(p: f64, focal: Option<&LossConfig>) -> f64 {
    let mut row = vec![(1.0 - p) / 6.0; 7];
    row[2] = p;
    let mut g = Graph::new(Precision::Oracle);
    let probs = g.constant(Tensor::new([1, 7], row).unwrap());
    let l = match focal {
        Some(cfg) => focal_loss(&mut g, probs, &[2], cfg),
        None => cross_entropy(&mut g, probs, &[2]),
    }
    .unwrap();
    g.value(l).data()[0]
}

pub fn focal_reduces_to_cross_entropy() -> Outcome {
    let plain = LossConfig {
        gamma: 0.0,
        alpha: vec![1.0; 7],
        ..LossConfig::focal()
    };
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..200 {
        let n = 1 + case % 8;
        let mut g = Graph::new(Precision::Oracle);
        let logits = g.constant(Tensor::from_fn([n, 7], |_| rng.random_range(-4.0..4.0)));
        let probs = g.softmax(logits).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let a = focal_loss(&mut g, probs, &labels, &plain).unwrap();
        let b = cross_entropy(&mut g, probs, &labels).unwrap();
        worst = worst.max((g.value(a).data()[0] - g.value(b).data()[0]).abs());
    }
    for p in [1e-9, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0] {
        worst = worst.max((single_loss(p, Some(&plain)) - single_loss(p, None)).abs());
    }
    Outcome::new(worst < 1e-12, format!("207 batches, max |focal - CE| = {worst:.2e}"))
}

pub fn focal_value_against_formula() -> Outcome {
    let fl = single_loss(0.9, Some(&LossConfig::focal()));
    let formula = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
    let d = (fl - formula).abs();
    Outcome::new(
        d < 1e-9,
        format!("FL(0.9) = {fl:.10e}, 0.25*0.1^2*(-ln 0.9) = {formula:.10e}, |diff| = {d:.1e}"),
    )
}

pub fn focal_value_against_literal() -> Outcome {
    let fl = single_loss(0.9, Some(&LossConfig::focal()));
    let d = (fl - 2.634e-4).abs();
    Outcome::new(
        d <= 1e-9,
        format!("FL(0.9) = {fl:.10e} vs 2.634e-4: |diff| = {d:.3e}, tolerance 1e-9"),
    )
}

pub fn cross_entropy_of_a_half() -> Outcome {
    let ce = single_loss(0.5, None);
    let d = (ce - std::f64::consts::LN_2).abs();
    Outcome::new(d < 1e-12, format!("CE(0.5) - ln 2 = {d:.1e}"))
}

// ---- residual block -------------------------------------------------------

pub fn zeroed_residual_branch() -> Outcome {
    let c = 4;
    let mut p = ParamStore::new();
    for conv in ["b.conv1", "b.conv2"] {
        p.insert(format!("{conv}.weight"), Tensor::zeros([c, c, 3, 3]), true);
    }
    for bn in ["b.bn1", "b.bn2"] {
        p.insert(format!("{bn}.gamma"), Tensor::zeros([c]), true);
        p.insert(format!("{bn}.beta"), Tensor::zeros([c]), true);
        p.insert(format!("{bn}.running_mean"), random(&[c], 1), false);
        p.insert(format!("{bn}.running_var"), random(&[c], 2).map(|v| v.abs() + 0.5), false);
    }
    let mut exact = 0;
    let mut total = 0;
    for seed in 0..20 {
        let x = random(&[2, c, 5, 5], 500 + seed).map(|v| v * 10.0);
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new(Precision::Oracle);
            let v = g.constant(x.clone());
            let mut ctx = Ctx::new(&mut g, &p, mode);
            let y = nn::residual_block(&mut ctx, "b", v, c, c, 1).unwrap();
            total += 1;
            if g.value(y) == &x {
                exact += 1;
            }
        }
    }
    Outcome::new(exact == total, format!("{exact}/{total} outputs bit-identical to the input (20 inputs, train and eval)"))
}

// ---- ARM ------------------------------------------------------------------

pub fn feature_arrangement_round_trip() -> Outcome {
    let mut checked = 0;
    let mut exact = 0;
    for (i, c) in [1, 4, 9, 16, 64, 256].into_iter().enumerate() {
        for (h, w) in [(1, 1), (3, 2), (4, 4)] {
            let x = random(&[2, c, h, w], 40 + i as u64);
            let mut g = Graph::new(Precision::Oracle);
            let v = g.constant(x.clone());
            let p = feature_arrange(&mut g, v).unwrap();
            let back = inverse_arrange(&mut g, &p).unwrap();
            checked += 1;
            let side = (c as f64).sqrt() as usize;
            if g.value(back) == &x && g.shape(p.plane) == [2, 1, h * side, w * side] {
                exact += 1;
            }
        }
    }
    Outcome::new(exact == checked, format!("{exact}/{checked} maps restored bit-exactly"))
}

/// Fraction of a k×k window centred at (i, j) that lies inside the plane.
fn inside_fraction(i: usize, j: usize, h: usize, w: usize, k: usize) -> f64 {
    let r = (k / 2) as i64;
    let mut inside = 0;
    for di in -r..=r {
        for dj in -r..=r {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            if a >= 0 && b >= 0 && a < h as i64 && b < w as i64 {
                inside += 1;
            }
        }
    }
    inside as f64 / (k * k) as f64
}

pub fn de_albino_weights() -> Outcome {
    let spec = ConvStackSpec::same(3);
    let mut mismatches = 0;
    let mut interior = 0;
    let mut corners = Vec::new();
    for (h, w) in [(3, 3), (5, 6), (8, 8), (12, 7)] {
        let grid = de_albino_grid(h, w, &spec).unwrap();
        for i in 0..h {
            for j in 0..w {
                let got = grid.at(&[i, j]);
                if got != inside_fraction(i, j, h, w, 3) {
                    mismatches += 1;
                }
                if i > 0 && j > 0 && i + 1 < h && j + 1 < w {
                    interior += 1;
                    if got != 1.0 {
                        mismatches += 1;
                    }
                }
            }
        }
        for (i, j) in [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)] {
            corners.push(grid.at(&[i, j]));
        }
    }
    let corners_ok = corners.iter().all(|&c| c == 4.0 / 9.0);
    Outcome::new(
        mismatches == 0 && corners_ok,
        format!("{interior} interior weights, {} corners = 4/9, {mismatches} mismatches against window enumeration", corners.len()),
    )
}

pub fn sharing_affinity() -> Outcome {
    let mut worst = 0.0f64;
    let mut eval_identity = true;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..50 {
        let n = 2 + case % 9;
        let f = random(&[n, 16], 900 + case as u64).map(|v| v * 5.0);
        let mut g = Graph::new(Precision::Oracle);
        let fv = g.constant(f.clone());
        let lam = g.constant(Tensor::new([1], vec![rng.random_range(0.0..1.0)]).unwrap());
        let out = share_affinity(&mut g, fv, Mode::Train, lam).unwrap();
        let m_in = g.mean_rows(fv).unwrap();
        let m_out = g.mean_rows(out).unwrap();
        for (a, b) in g.value(m_in).data().iter().zip(g.value(m_out).data()) {
            worst = worst.max((a - b).abs());
        }
        let ev = share_affinity(&mut g, fv, Mode::Eval, lam).unwrap();
        eval_identity &= g.value(ev) == &f;
    }
    // the whole head, eval mode: sharing off, so rows are independent
    let mut params = ParamStore::new();
    arm::init_params(&mut params, "arm");
    let x = random(&[4, 16, 3, 3], 77);
    let head = |x: &Tensor| {
        let mut g = Graph::new(Precision::Oracle);
        let v = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &params, Mode::Eval);
        let y = arm::arm_forward(&mut ctx, "arm", v, &ConvStackSpec::same(3)).unwrap();
        g.value(y).clone()
    };
    let batch = head(&x);
    let alone = head(&x.slice_rows(1, 1).unwrap());
    eval_identity &= batch.slice_rows(1, 1).unwrap() == alone;
    Outcome::new(
        worst < 1e-9 && eval_identity,
        format!("50 batches, max batch-mean drift {worst:.1e}; eval identity {eval_identity}"),
    )
}

// ---- GAN ------------------------------------------------------------------

pub fn blend_identities() -> Outcome {
    let mut ok = 0;
    let mut total = 0;
    for seed in 0..5u64 {
        let res = [8, 16, 32][seed as usize % 3];
        let gen = Generator::new(res, 4, seed);
        let x = random(&[2, 3, res, res], 60 + seed).map(|v| v * 0.999);
        let aus = [AUVector::new(&reference_aus()[seed as usize]).unwrap()];
        let one = gen.generate_with(&x, &aus, Some(1.0)).unwrap();
        let zero = gen.generate_with(&x, &aus, Some(0.0)).unwrap();
        total += 2;
        ok += (one.output == x) as usize + (zero.output == zero.color) as usize;
    }
    Outcome::new(ok == total, format!("{ok}/{total} blends exact (A=1 → input, A=0 → colour mask)"))
}

pub fn synthesis_counts() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let written = write_corpus(dir.path(), 2, 16, 5).unwrap();
    let sources = Corpus::from_records(dir.path(), written.into_iter().take(10).collect()).unwrap();
    let refs: ExpressionRefs = Expression::ALL
        .iter()
        .zip(reference_aus())
        .map(|(e, v)| (*e, AUVector::new(&v).unwrap()))
        .collect();
    let gen = Generator::new(16, 4, 9);
    let out = synthesize_corpus(&gen, &sources, &refs, "generated").unwrap();
    let mut per_class = [0usize; 7];
    let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
    let mut files = 0;
    for r in &out {
        if let Some(l) = r.label {
            per_class[l.code()] += 1;
        }
        *per_source.entry(&r.source_id).or_default() += 1;
        files += sources.image_path(r).is_file() as usize;
    }
    let generated = out.iter().all(|r| r.origin == Origin::Generated);
    let pass = out.len() == 70
        && per_class == [10; 7]
        && per_source.len() == 10
        && per_source.values().all(|&n| n == 7)
        && files == 70
        && generated;
    Outcome::new(pass, format!("{} records, per class {per_class:?}, {} sources × 7, {files} files", out.len(), per_source.len()))
}

// ---- split ----------------------------------------------------------------

pub const GROUPS: usize = 2670;

/// 2670 collected images, each with six generated siblings, one record per
/// expression in every group.
pub fn paper_scale_corpus() -> Corpus {
    let mut records = Vec::with_capacity(GROUPS * 7);
    for g in 0..GROUPS {
        let own = g % 7;
        let src = format!("tw{g:04}");
        records.push(ImageRecord::collected(&src, format!("{src}.png"), Some(Expression::ALL[own])));
        for k in (0..7).filter(|&k| k != own) {
            let id = format!("{src}-{k}");
            records.push(ImageRecord {
                source_id: src.clone(),
                path: format!("gen/{id}.png"),
                origin: Origin::Generated,
                label: Some(Expression::ALL[k]),
                ..ImageRecord::collected(id, "", None)
            });
        }
    }
    Corpus::from_records("", records).unwrap()
}

fn group_partitions(corpus: &Corpus, spec: &SplitSpec) -> BTreeMap<String, BTreeSet<Partition>> {
    let mut groups: BTreeMap<String, BTreeSet<Partition>> = BTreeMap::new();
    for r in corpus.records() {
        groups
            .entry(r.source_id.clone())
            .or_default()
            .insert(spec.partition_of(&r.id).unwrap());
    }
    groups
}

pub fn strict_split(corpus: &Corpus) -> Outcome {
    let spec = split(corpus, DEFAULT_RATIOS, SplitMode::Strict, 11).unwrap();
    let groups = group_partitions(corpus, &spec);
    let crossing = groups.values().filter(|s| s.len() > 1).count();
    let mut group_counts = [0i64; 3];
    for parts in groups.values() {
        if let Some(p) = parts.iter().next() {
            group_counts[Partition::ALL.iter().position(|q| q == p).unwrap()] += 1;
        }
    }
    let want = [1869i64, 267, 534];
    let within = group_counts.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1);
    let records = spec.counts();
    let assigned = spec.assignment.len() == corpus.len();
    let again = split(corpus, DEFAULT_RATIOS, SplitMode::Strict, 11).unwrap();
    let other = split(corpus, DEFAULT_RATIOS, SplitMode::Strict, 12).unwrap();
    let deterministic = again == spec && other.assignment != spec.assignment;
    Outcome::new(
        crossing == 0 && within && assigned && deterministic,
        format!(
            "{} records in {} groups: groups {group_counts:?} (want {want:?} ±1), records {records:?}, {crossing} groups crossing, deterministic {deterministic}",
            corpus.len(),
            groups.len()
        ),
    )
}

pub fn leaky_split(corpus: &Corpus) -> Outcome {
    let spec = split(corpus, DEFAULT_RATIOS, SplitMode::Leaky, 11).unwrap();
    let mut per_class = [[0i64; 3]; 7];
    let mut class_total = [0i64; 7];
    for r in corpus.records() {
        let c = r.label.unwrap().code();
        let p = spec.partition_of(&r.id).unwrap();
        per_class[c][Partition::ALL.iter().position(|q| *q == p).unwrap()] += 1;
        class_total[c] += 1;
    }
    let mut worst = 0.0f64;
    for c in 0..7 {
        for k in 0..3 {
            let ideal = class_total[c] as f64 * DEFAULT_RATIOS[k];
            worst = worst.max((per_class[c][k] as f64 - ideal).abs());
        }
    }
    let again = split(corpus, DEFAULT_RATIOS, SplitMode::Leaky, 11).unwrap();
    let other = split(corpus, DEFAULT_RATIOS, SplitMode::Leaky, 12).unwrap();
    let deterministic = again == spec && other.assignment != spec.assignment;
    Outcome::new(
        worst <= 1.0 && deterministic,
        format!("per-class partition counts {:?}, max deviation {worst:.2}, deterministic {deterministic}", per_class[0]),
    )
}

// ---- majority vote ---------------------------------------------------------

/// Winner by direct comparison of every pair of classes.
fn vote_oracle(ballots: &[Vec<usize>], policy: TiePolicy) -> ([usize; 7], Option<usize>) {
    let mut votes = [0usize; 7];
    for b in ballots {
        for &c in b {
            votes[c] += 1;
        }
    }
    let strict = (0..7).find(|&c| (0..7).all(|d| d == c || votes[c] > votes[d]));
    let label = match policy {
        TiePolicy::StrictMajority => strict,
        TiePolicy::Ordered => (0..7).find(|&c| votes[c] > 0 && (0..7).all(|d| votes[c] >= votes[d])),
    };
    (votes, label)
}

/// Every assignment of a nonempty subset of `classes` to each of up to six
/// annotators, under both tie policies.
pub fn majority_vote_exhaustive() -> Outcome {
    let mut configurations = 0u64;
    let mut mismatches = 0u64;
    let mut unresolved_ties = 0u64;
    let mut tie_cases = 0u64;
    for classes in [[0usize, 1, 2], [6, 3, 1]] {
        let subsets: Vec<Vec<usize>> = (1u8..8)
            .map(|m| (0..3).filter(|b| m & (1 << b) != 0).map(|b| classes[b]).collect())
            .collect();
        for annotators in 0..=6u32 {
            let total = 7u64.pow(annotators);
            for code in 0..total {
                let mut rest = code;
                let ballots: Vec<Vec<usize>> = (0..annotators)
                    .map(|_| {
                        let s = subsets[(rest % 7) as usize].clone();
                        rest /= 7;
                        s
                    })
                    .collect();
                let records: Vec<AnnotationRecord> = ballots
                    .iter()
                    .enumerate()
                    .map(|(a, b)| AnnotationRecord::new("img", format!("a{a}"), b.iter().map(|&c| Expression::ALL[c]).collect()))
                    .collect();
                configurations += 1;
                for policy in [TiePolicy::StrictMajority, TiePolicy::Ordered] {
                    let got = aggregate_annotations(&records, policy);
                    let (votes, label) = vote_oracle(&ballots, policy);
                    let ok = match got.get("img") {
                        None => annotators == 0,
                        Some(o) => {
                            o.votes == votes
                                && o.annotators == annotators as usize
                                && o.label.map(|e| e.code()) == label
                        }
                    };
                    mismatches += (!ok) as u64;
                    if policy == TiePolicy::StrictMajority && annotators > 0 {
                        let top = *votes.iter().max().unwrap();
                        if votes.iter().filter(|&&v| v == top).count() > 1 {
                            tie_cases += 1;
                            unresolved_ties += got["img"].label.is_none() as u64;
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        mismatches == 0 && unresolved_ties == tie_cases && TiePolicy::default() == TiePolicy::StrictMajority,
        format!(
            "{configurations} configurations × 2 policies, {mismatches} mismatches; {unresolved_ties}/{tie_cases} ties unresolved under the default policy"
        ),
    )
}

// ---- reports ---------------------------------------------------------------

pub fn metrics_example_and_csv() -> Outcome {
    let mut truth = vec![0; 10];
    truth.extend([1, 1]);
    let mut pred = vec![0; 9];
    pred.extend([1, 1, 0]);
    let r = MetricsReport::from_predictions(&truth, &pred).unwrap();
    let example = r.micro_average == 10.0 / 12.0 && r.macro_average == (9.0 / 10.0 + 1.0 / 2.0) / 2.0;
    let mut round_trips = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut reports = vec![r.clone()];
    for n in [1usize, 7, 50, 333] {
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let p: Vec<usize> = t.iter().map(|&c| if rng.random_bool(0.7) { c } else { rng.random_range(0..7) }).collect();
        reports.push(MetricsReport::from_predictions(&t, &p).unwrap());
    }
    for rep in &reports {
        if MetricsReport::from_csv(&rep.to_csv().unwrap()).unwrap() == *rep {
            round_trips += 1;
        }
    }
    Outcome::new(
        example && round_trips == reports.len(),
        format!(
            "micro {:.4} macro {:.4}; {round_trips}/{} CSV round trips identical",
            r.micro_average,
            r.macro_average,
            reports.len()
        ),
    )
}

/// Percent to one decimal from integers alone, halves rounded up.
fn tenths(k: usize, n: usize) -> String {
    let t = (2000 * k + n) / (2 * n);
    format!("{}.{}", t / 10, t % 10)
}

pub fn distribution_percentages() -> Outcome {
    use Expression::*;
    // (posture, group size, [(class, count, expected text)])
    type Case = (Posture, usize, &'static [(Expression, usize, &'static str)]);
    let cases: [Case; 5] = [
        (Posture::Kneeling, 18, &[(Disgust, 7, "38.9"), (Sad, 6, "33.3")]),
        (Posture::General, 25, &[(Happy, 17, "68.0"), (Neutral, 4, "16.0")]),
        (Posture::Vertical, 17, &[(Disgust, 6, "35.3"), (Sad, 5, "29.4")]),
        (Posture::Cavalry, 6, &[(Disgust, 5, "83.3")]),
        (Posture::CivilServant, 19, &[(Disgust, 5, "26.3"), (Anger, 4, "21.1")]),
    ];
    let mut groups = BTreeMap::new();
    for (posture, size, cells) in &cases {
        let mut counts = [0usize; 7];
        for (e, k, _) in cells.iter() {
            counts[e.code()] = *k;
        }
        // the remainder goes to a class not listed for this group
        let filler = Expression::ALL.iter().find(|e| cells.iter().all(|c| c.0 != **e)).unwrap();
        counts[filler.code()] = size - counts.iter().sum::<usize>();
        groups.insert(*posture, counts);
    }
    let report = DistributionReport::from_counts(groups).unwrap();
    let mut shown = Vec::new();
    let mut ok = true;
    for (posture, size, cells) in &cases {
        for (e, k, want) in cells.iter() {
            let got = report.percent_text(*posture, *e).unwrap_or_default();
            ok &= got == *want && tenths(*k, *size) == *want && report.size(*posture) == *size;
            shown.push(format!("{k}/{size}→{got}"));
        }
    }
    Outcome::new(ok, shown.join(" "))
}

// ---- end to end --------------------------------------------------------------

pub struct E2eRun {
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

/// Train and val sets plus the corpus size.
pub fn e2e_data(dir: &std::path::Path) -> (Dataset, Dataset, usize) {
    write_corpus(dir, 100, 32, 7).unwrap();
    let corpus = ingest(dir.join("manifest.jsonl"), IngestOptions::default()).unwrap();
    let spec = split(&corpus, DEFAULT_RATIOS, SplitMode::Strict, 7).unwrap();
    let tr = Dataset::load(&corpus, spec.records(&corpus, Partition::Train), 32).unwrap();
    let va = Dataset::load(&corpus, spec.records(&corpus, Partition::Val), 32).unwrap();
    (tr, va, corpus.len())
}

pub fn e2e_run(tr: &Dataset, va: &Dataset) -> E2eRun {
    let net = build_resnet18(&NetworkConfig::toy(Head::Arm, 7)).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        loss: LossConfig::focal(),
        precision: Precision::Oracle,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(net, tr, Some(va), &cfg, |r| {
        eprintln!(
            "  epoch {:2} loss {:.5} val micro {:.4}",
            r.epoch,
            r.train_loss,
            r.val_micro.unwrap_or(f64::NAN)
        )
    })
    .unwrap();
    E2eRun {
        history: out.history,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn e2e_accuracy(images: usize, tr: &Dataset, va: &Dataset, run: &E2eRun) -> Outcome {
    let best = run
        .history
        .iter()
        .filter_map(|r| r.val_micro.map(|m| (r.epoch, m)))
        .find(|(_, m)| *m >= 0.95);
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let pass = images == 700 && best.is_some() && run.history.len() <= 20 && run.seconds < 600.0;
    Outcome::new(
        pass,
        format!(
            "{} images ({} train / {} val), {}; final val micro {:.4}; {} epochs in {:.0}s on {cores} core(s)",
            images,
            tr.len(),
            va.len(),
            match best {
                Some((e, m)) => format!("val micro {m:.4} ≥ 0.95 at epoch {}", e + 1),
                None => "never reached 0.95".to_string(),
            },
            run.history.last().and_then(|r| r.val_micro).unwrap_or(f64::NAN),
            run.history.len(),
            run.seconds
        ),
    )
}

pub fn e2e_rerun(a: &E2eRun, b: &E2eRun) -> Outcome {
    let bits = |h: &[EpochRecord]| -> Vec<u64> {
        h.iter()
            .flat_map(|r| {
                [
                    r.lr.to_bits(),
                    r.train_loss.to_bits(),
                    r.val_loss.map_or(0, f64::to_bits),
                    r.val_micro.map_or(0, f64::to_bits),
                ]
            })
            .collect()
    };
    let same = bits(&a.history) == bits(&b.history) && a.history.len() == b.history.len();
    Outcome::new(same, format!("{} epochs compared bit-for-bit, identical {same}", a.history.len()))
}

// ---- effectiveness -------------------------------------------------------------

pub fn identical_arms_gap() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 6, 32, 13).unwrap();
    let corpus = ingest(dir.path().join("manifest.jsonl"), IngestOptions::default()).unwrap();
    let data = Dataset::load(&corpus, corpus.records(), 32).unwrap();
    let net = build_resnet18(&NetworkConfig::toy(Head::Arm, 13)).unwrap();
    let real = evaluate(&net, &data, Precision::Oracle).unwrap();
    let generated = evaluate(&net, &data, Precision::Oracle).unwrap();
    let r = EffectivenessReport::from_reports(real, generated).unwrap();
    let zero = r.gap.iter().all(|g| *g == Some(0.0));
    Outcome::new(zero, format!("gap per class and average: {:?}", r.gap))
}

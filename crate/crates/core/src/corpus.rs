//! Image manifests, annotation aggregation and partitioning.
//!
//! A manifest is UTF-8 text with one JSON object per line:
//!
//! ```text
//! {"id":"w001","source_id":"w001","path":"img/w001.png","origin":"collected","posture":"kneeling","label":"Sad","landmark_ok":true}
//! {"id":"w001-fear","source_id":"w001","path":"gen/w001-fear.png","origin":"generated","label":"Fear","landmark_ok":true}
//! ```
//!
//! Paths are relative to the directory holding the manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The seven expression classes in canonical code order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Expression {
    Surprise = 0,
    Fear = 1,
    Disgust = 2,
    Happy = 3,
    Sad = 4,
    #[serde(alias = "Angry")]
    Anger = 5,
    Neutral = 6,
}

impl Expression {
    pub const ALL: [Expression; 7] = [
        Expression::Surprise,
        Expression::Fear,
        Expression::Disgust,
        Expression::Happy,
        Expression::Sad,
        Expression::Anger,
        Expression::Neutral,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or(Error::LabelOutOfRange(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            Expression::Surprise => "Surprise",
            Expression::Fear => "Fear",
            Expression::Disgust => "Disgust",
            Expression::Happy => "Happy",
            Expression::Sad => "Sad",
            Expression::Anger => "Anger",
            Expression::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Expression {
    type Err = String;

    /// Case-insensitive; accepts `Angry` for `Anger`.
    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "angry" {
            return Ok(Expression::Anger);
        }
        Self::ALL
            .into_iter()
            .find(|e| e.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| format!("unknown expression `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Kneeling,
    General,
    Vertical,
    Cavalry,
    CivilServant,
}

impl Posture {
    pub const ALL: [Posture; 5] = [
        Posture::Kneeling,
        Posture::General,
        Posture::Vertical,
        Posture::Cavalry,
        Posture::CivilServant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Posture::Kneeling => "kneeling",
            Posture::General => "general",
            Posture::Vertical => "vertical",
            Posture::Cavalry => "cavalry",
            Posture::CivilServant => "civil_servant",
        }
    }
}

impl fmt::Display for Posture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Posture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown posture `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Collected,
    Generated,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Collected => "collected",
            Origin::Generated => "generated",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "collected" => Ok(Origin::Collected),
            "generated" => Ok(Origin::Generated),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Own id for collected images, parent id for generated ones.
    pub source_id: String,
    pub path: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posture: Option<Posture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Expression>,
    pub landmark_ok: bool,
    /// Action-unit magnitudes: measured for collected images, the
    /// conditioning target for generated ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub au: Option<Vec<f64>>,
}

impl ImageRecord {
    pub fn collected(id: impl Into<String>, path: impl Into<String>, label: Option<Expression>) -> Self {
        let id = id.into();
        ImageRecord {
            source_id: id.clone(),
            id,
            path: path.into(),
            origin: Origin::Collected,
            posture: None,
            label,
            landmark_ok: true,
            au: None,
        }
    }
}

/// Parses manifest text; blank lines are skipped.
pub fn parse_manifest(text: &str, origin_name: &str) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: format!("{origin_name}:{}", i + 1),
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn manifest_text(records: &[ImageRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, manifest_text(records)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct IngestOptions {
    /// Open every image header to confirm it decodes.
    pub verify_images: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            verify_images: true,
        }
    }
}

/// A validated, immutable set of image records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    root: PathBuf,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Checks id uniqueness and lineage. Image files are not touched.
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() || r.id.chars().any(char::is_whitespace) {
                return Err(Error::Corpus(format!(
                    "record {} has an empty id or an id containing whitespace: {:?}",
                    i + 1,
                    r.id
                )));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        for r in &records {
            if r.origin == Origin::Generated && r.source_id == r.id {
                return Err(Error::Corpus(format!(
                    "generated record `{}` must name its parent in source_id",
                    r.id
                )));
            }
            if r.source_id != r.id && !index.contains_key(&r.source_id) {
                return Err(Error::DanglingSource {
                    id: r.id.clone(),
                    source_id: r.source_id.clone(),
                });
            }
            if let Some(au) = &r.au {
                if au.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Corpus(format!("record `{}` has a non-finite AU value", r.id)));
                }
            }
        }
        Ok(Corpus {
            root: root.into(),
            records,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// A new corpus over the records that pass `keep`. The subset is not
    /// re-validated, so lineage may point at records outside it.
    pub fn filtered(&self, keep: impl Fn(&ImageRecord) -> bool) -> Corpus {
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Corpus {
            root: self.root.clone(),
            records,
            index,
        }
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        write_manifest(path, &self.records)
    }
}

/// Reads and validates a manifest; image paths resolve against its directory.
pub fn ingest(manifest_path: impl AsRef<Path>, opts: IngestOptions) -> Result<Corpus> {
    let manifest_path = manifest_path.as_ref();
    let records = read_manifest(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let corpus = Corpus::from_records(root, records)?;
    if opts.verify_images {
        for r in corpus.records() {
            let path = corpus.image_path(r);
            let dims = image::ImageReader::open(&path)
                .and_then(|reader| reader.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|reader| reader.into_dimensions().map_err(|e| e.to_string()));
            if let Err(reason) = dims {
                return Err(Error::UnreadableImage { path, reason });
            }
        }
    }
    Ok(corpus)
}

// ---- annotations ----------------------------------------------------------

pub const MAX_CHOICES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator_id: String,
    #[serde(serialize_with = "choices_out", deserialize_with = "choices_in")]
    pub choices: Vec<Expression>,
    #[serde(serialize_with = "rfc3339_out")]
    pub timestamp: DateTime<Utc>,
}

fn choices_out<S: Serializer>(choices: &[Expression], s: S) -> std::result::Result<S::Ok, S::Error> {
    let names: Vec<&str> = choices.iter().map(|c| c.name()).collect();
    s.serialize_str(&names.join(","))
}

fn choices_in<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Expression>, D::Error> {
    let text = String::deserialize(d)?;
    parse_choices(&text).map_err(serde::de::Error::custom)
}

fn rfc3339_out<S: Serializer>(t: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
}

/// Comma-separated expression names; empty entries are ignored.
pub fn parse_choices(text: &str) -> Result<Vec<Expression>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Expression::from_str)
        .collect()
}

impl AnnotationRecord {
    pub fn new(
        image_id: impl Into<String>,
        annotator_id: impl Into<String>,
        choices: Vec<Expression>,
    ) -> Self {
        AnnotationRecord {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
            choices,
            timestamp: Utc::now(),
        }
    }

    /// Every violated invariant, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.image_id.trim().is_empty() {
            v.push("image_id must not be empty".to_string());
        }
        if self.annotator_id.trim().is_empty() {
            v.push("annotator_id must not be empty".to_string());
        }
        let n = self.choices.len();
        if !(1..=MAX_CHOICES).contains(&n) {
            v.push(format!("choices must list 1 to 3 expression categories, got {n}"));
        }
        let distinct: BTreeSet<_> = self.choices.iter().collect();
        if distinct.len() != n {
            v.push("choices must be distinct".to_string());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TiePolicy {
    /// Ties leave the image unresolved.
    #[default]
    StrictMajority,
    /// Ties go to the class with the lowest canonical code.
    Ordered,
}

impl FromStr for TiePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict-majority" | "strict" => Ok(TiePolicy::StrictMajority),
            "ordered" => Ok(TiePolicy::Ordered),
            other => Err(format!("unknown tie policy `{other}`")),
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::StrictMajority => "strict-majority",
            TiePolicy::Ordered => "ordered",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VoteOutcome {
    /// `None` when unresolved.
    pub label: Option<Expression>,
    /// Votes per class in canonical order.
    pub votes: [usize; 7],
    pub annotators: usize,
}

/// Majority vote per image: every choice of every annotator is one vote.
pub fn aggregate_annotations<'a>(
    records: impl IntoIterator<Item = &'a AnnotationRecord>,
    policy: TiePolicy,
) -> BTreeMap<String, VoteOutcome> {
    let mut tallies: BTreeMap<String, ([usize; 7], BTreeSet<&str>)> = BTreeMap::new();
    for r in records {
        let entry = tallies.entry(r.image_id.clone()).or_default();
        for c in &r.choices {
            entry.0[c.code()] += 1;
        }
        entry.1.insert(&r.annotator_id);
    }
    tallies
        .into_iter()
        .map(|(id, (votes, annotators))| {
            let top = *votes.iter().max().unwrap_or(&0);
            let leaders: Vec<usize> = (0..7).filter(|&c| votes[c] == top && top > 0).collect();
            let label = match (leaders.as_slice(), policy) {
                ([only], _) => Some(Expression::ALL[*only]),
                ([first, ..], TiePolicy::Ordered) => Some(Expression::ALL[*first]),
                _ => None,
            };
            let outcome = VoteOutcome {
                label,
                votes,
                annotators: annotators.len(),
            };
            (id, outcome)
        })
        .collect()
}

#[derive(Debug)]
pub enum AppendError {
    Invalid(Vec<String>),
    Duplicate { image_id: String, annotator_id: String },
    Io(std::io::Error),
    Serialize(serde_json::Error),
}

impl fmt::Display for AppendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppendError::Invalid(v) => write!(f, "{}", v.join("; ")),
            AppendError::Duplicate {
                image_id,
                annotator_id,
            } => write!(f, "annotator `{annotator_id}` already labeled image `{image_id}`"),
            AppendError::Io(e) => write!(f, "annotation store write failed: {e}"),
            AppendError::Serialize(e) => write!(f, "annotation encoding failed: {e}"),
        }
    }
}

impl std::error::Error for AppendError {}

struct StoreState {
    file: File,
    records: Vec<AnnotationRecord>,
    seen: BTreeSet<(String, String)>,
}

/// Append-only annotation log. Each record is one line written with a
/// single `write_all` on a file opened in append mode, under a lock that
/// also guards the duplicate check.
pub struct AnnotationStore {
    path: PathBuf,
    state: Mutex<StoreState>,
}

impl AnnotationStore {
    /// Opens or creates the store, loading existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let records = read_annotations(&path)?;
        let seen = records
            .iter()
            .map(|r| (r.image_id.clone(), r.annotator_id.clone()))
            .collect();
        Ok(AnnotationStore {
            path,
            state: Mutex::new(StoreState {
                file,
                records,
                seen,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: AnnotationRecord) -> Result<(), AppendError> {
        let v = record.violations();
        if !v.is_empty() {
            return Err(AppendError::Invalid(v));
        }
        let mut line = serde_json::to_string(&record).map_err(AppendError::Serialize)?;
        line.push('\n');
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let key = (record.image_id.clone(), record.annotator_id.clone());
        if st.seen.contains(&key) {
            return Err(AppendError::Duplicate {
                image_id: key.0,
                annotator_id: key.1,
            });
        }
        st.file.write_all(line.as_bytes()).map_err(AppendError::Io)?;
        st.file.flush().map_err(AppendError::Io)?;
        st.seen.insert(key);
        st.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).records.clone()
    }

    pub fn has(&self, image_id: &str, annotator_id: &str) -> bool {
        self.state
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .seen
            .contains(&(image_id.to_string(), annotator_id.to_string()))
    }
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Collected images `annotator` has not labeled yet, in manifest order.
pub fn pending_images<'a>(
    corpus: &'a Corpus,
    annotations: &[AnnotationRecord],
    annotator: &str,
) -> Vec<&'a ImageRecord> {
    let done: BTreeSet<&str> = annotations
        .iter()
        .filter(|a| a.annotator_id == annotator)
        .map(|a| a.image_id.as_str())
        .collect();
    corpus
        .records()
        .iter()
        .filter(|r| r.origin == Origin::Collected && !done.contains(r.id.as_str()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AnnotationProgress {
    /// Records written by each annotator.
    pub per_annotator: BTreeMap<String, usize>,
    /// Distinct annotators per collected image, zero included.
    pub per_image: BTreeMap<String, usize>,
}

pub fn annotation_progress(corpus: &Corpus, annotations: &[AnnotationRecord]) -> AnnotationProgress {
    let mut p = AnnotationProgress::default();
    for r in corpus.records().iter().filter(|r| r.origin == Origin::Collected) {
        p.per_image.insert(r.id.clone(), 0);
    }
    for a in annotations {
        *p.per_annotator.entry(a.annotator_id.clone()).or_default() += 1;
        *p.per_image.entry(a.image_id.clone()).or_default() += 1;
    }
    p
}

// ---- splits ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown partition `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Whole source groups go to one partition.
    Strict,
    /// Records are assigned independently, stratified by class.
    Leaky,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Strict => "strict",
            SplitMode::Leaky => "leaky",
        })
    }
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(SplitMode::Strict),
            "leaky" => Ok(SplitMode::Leaky),
            other => Err(format!("unknown split mode `{other}`")),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub mode: SplitMode,
    pub seed: u64,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitSpec {
    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        self.assignment.get(id).copied()
    }

    pub fn ids(&self, part: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for p in self.assignment.values() {
            c[*p as usize] += 1;
        }
        c
    }

    /// Records of `corpus` in `part`, in manifest order.
    pub fn records<'a>(&self, corpus: &'a Corpus, part: Partition) -> Vec<&'a ImageRecord> {
        corpus
            .records()
            .iter()
            .filter(|r| self.partition_of(&r.id) == Some(part))
            .collect()
    }

    /// Header comments followed by `id<TAB>partition` lines.
    pub fn to_text(&self) -> String {
        let [a, b, c] = self.ratios;
        let mut s = format!(
            "# mode = {}\n# seed = {}\n# ratios = {a} {b} {c}\n",
            self.mode, self.seed
        );
        for (id, p) in &self.assignment {
            s.push_str(&format!("{id}\t{p}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Parse {
            location: format!("split:{line}"),
            detail,
        };
        let mut mode = None;
        let mut seed = None;
        let mut ratios = None;
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let Some((k, v)) = h.split_once('=') else {
                    continue;
                };
                let v = v.trim();
                match k.trim() {
                    "mode" => mode = Some(v.parse().map_err(|e| bad(n, e))?),
                    "seed" => seed = Some(v.parse().map_err(|e: std::num::ParseIntError| bad(n, e.to_string()))?),
                    "ratios" => {
                        let r: Vec<f64> = v
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<Result<_, _>>()
                            .map_err(|e: std::num::ParseFloatError| bad(n, e.to_string()))?;
                        let r: [f64; 3] = r
                            .try_into()
                            .map_err(|_| bad(n, "expected three ratios".into()))?;
                        ratios = Some(r);
                    }
                    _ => {}
                }
                continue;
            }
            let (id, p) = line
                .split_once('\t')
                .ok_or_else(|| bad(n, "expected `id<TAB>partition`".into()))?;
            let p: Partition = p.trim().parse().map_err(|e| bad(n, e))?;
            if assignment.insert(id.to_string(), p).is_some() {
                return Err(bad(n, format!("id `{id}` listed twice")));
            }
        }
        Ok(SplitSpec {
            ratios: ratios.ok_or_else(|| bad(0, "missing ratios header".into()))?,
            mode: mode.ok_or_else(|| bad(0, "missing mode header".into()))?,
            seed: seed.ok_or_else(|| bad(0, "missing seed header".into()))?,
            assignment,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Partition sizes for `n` items: train and val are rounded, test takes the rest.
pub fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64) * ratios[0]).round() as usize;
    let val = (((n as f64) * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

fn deal<T: Clone>(mut items: Vec<T>, ratios: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<(T, Partition)> {
    items.shuffle(rng);
    let [train, val, _] = partition_sizes(items.len(), ratios);
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            let p = if i < train {
                Partition::Train
            } else if i < train + val {
                Partition::Val
            } else {
                Partition::Test
            };
            (item, p)
        })
        .collect()
}

pub fn split(corpus: &Corpus, ratios: [f64; 3], mode: SplitMode, seed: u64) -> Result<SplitSpec> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(vec![format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?} (sum {total})"
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    match mode {
        SplitMode::Strict => {
            let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for r in corpus.records() {
                groups.entry(group_key(corpus, r)).or_default().push(&r.id);
            }
            let keys: Vec<&str> = groups.keys().copied().collect();
            for (key, p) in deal(keys, ratios, &mut rng) {
                for id in &groups[key] {
                    assignment.insert(id.to_string(), p);
                }
            }
        }
        SplitMode::Leaky => {
            let mut strata: BTreeMap<Option<Expression>, Vec<&str>> = BTreeMap::new();
            for r in corpus.records() {
                strata.entry(r.label).or_default().push(&r.id);
            }
            for ids in strata.into_values() {
                for (id, p) in deal(ids, ratios, &mut rng) {
                    assignment.insert(id.to_string(), p);
                }
            }
        }
    }
    Ok(SplitSpec {
        ratios,
        mode,
        seed,
        assignment,
    })
}

/// Root of the lineage chain a record belongs to.
fn group_key<'a>(corpus: &'a Corpus, r: &'a ImageRecord) -> &'a str {
    let mut cur = r;
    // lineage chains are short; the bound guards against cycles
    for _ in 0..corpus.len() {
        match corpus.get(&cur.source_id) {
            Some(parent) if parent.id != cur.id => cur = parent,
            _ => break,
        }
    }
    &cur.source_id
}

// ---- counts ---------------------------------------------------------------

/// Labeled records per class in canonical order; unlabeled records are skipped.
pub fn class_counts<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> [usize; 7] {
    let mut c = [0; 7];
    for r in records {
        if let Some(l) = r.label {
            c[l.code()] += 1;
        }
    }
    c
}

/// Class histograms per posture; records without a posture are skipped.
pub fn class_counts_by_posture<'a>(
    records: impl IntoIterator<Item = &'a ImageRecord>,
) -> BTreeMap<Posture, [usize; 7]> {
    let mut out: BTreeMap<Posture, [usize; 7]> = BTreeMap::new();
    for r in records {
        if let (Some(p), Some(l)) = (r.posture, r.label) {
            out.entry(p).or_default()[l.code()] += 1;
        }
    }
    out
}

/// Records per posture, labeled or not.
pub fn posture_counts<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> BTreeMap<Posture, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(p) = r.posture {
            *out.entry(p).or_default() += 1;
        }
    }
    out
}

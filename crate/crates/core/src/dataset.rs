//! Short-answer examples: file I/O, hashed bag-of-words features, stratified
//! splitting and a synthetic generator with planted per-question difficulty.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;

pub const NUM_CLASSES: usize = 3;

/// One student response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub question_id: String,
    pub answer_text: String,
    pub gold_label: usize,
}

/// Maps label strings in data files to class indices. Index 0 is always
/// the "correct" class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelScheme {
    names: Vec<String>,
}

impl LabelScheme {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config("label scheme needs at least two classes".into()));
        }
        let lowered: BTreeSet<String> = names.iter().map(|n| n.to_lowercase()).collect();
        if lowered.len() != names.len() {
            return Err(Error::Config(format!("duplicate label names in {names:?}")));
        }
        Ok(Self { names })
    }

    /// Correct / Incorrect / Contradictory.
    pub fn three_way() -> Self {
        Self {
            names: vec!["correct".into(), "incorrect".into(), "contradictory".into()],
        }
    }

    /// Correct / Incorrect / Partially correct.
    pub fn partial_credit() -> Self {
        Self {
            names: vec!["correct".into(), "incorrect".into(), "partially_correct".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    /// Case-insensitive name lookup; a bare class index is also accepted.
    pub fn parse(&self, s: &str) -> Option<usize> {
        let s = s.trim();
        if let Some(i) = self.names.iter().position(|n| n.eq_ignore_ascii_case(s)) {
            return Some(i);
        }
        s.parse::<usize>().ok().filter(|&i| i < self.names.len())
    }
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self::three_way()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    JsonLines,
}

impl FileFormat {
    /// Guess from the extension: `.jsonl`/`.json` are JSON-lines, anything
    /// else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => FileFormat::JsonLines,
            _ => FileFormat::Csv,
        }
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn check_example(path: &Path, line: u64, qid: &str, text: &str, label: &str, scheme: &LabelScheme) -> Result<Example> {
    if qid.trim().is_empty() {
        return Err(parse_err(path, line, "empty question_id"));
    }
    let gold_label = scheme
        .parse(label)
        .ok_or_else(|| parse_err(path, line, format!("unknown label {label:?}")))?;
    Ok(Example {
        question_id: qid.to_string(),
        answer_text: text.to_string(),
        gold_label,
    })
}

/// Reads examples in file order. Line numbers in errors are 1-based
/// physical lines.
pub fn load_examples(path: &Path, format: FileFormat, scheme: &LabelScheme) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let examples = match format {
        FileFormat::Csv => load_csv(path, file, scheme)?,
        FileFormat::JsonLines => load_jsonl(path, file, scheme)?,
    };
    if examples.is_empty() {
        return Err(parse_err(path, 1, "file contains no examples"));
    }
    Ok(examples)
}

fn load_csv(path: &Path, file: File, scheme: &LabelScheme) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))
    };
    let (qi, ti, li) = (column("question_id")?, column("answer_text")?, column("label")?);

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| parse_err(path, line, format!("record missing {name}")))
        };
        let qid = field(qi, "question_id")?;
        let text = field(ti, "answer_text")?;
        let label = field(li, "label")?;
        out.push(check_example(path, line, qid, text, label, scheme)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonRecord {
    question_id: Option<serde_json::Value>,
    answer_text: Option<String>,
    label: Option<serde_json::Value>,
}

fn load_jsonl(path: &Path, file: File, scheme: &LabelScheme) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let qid = match rec.question_id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(parse_err(path, lineno, "question_id must be a string")),
            None => return Err(parse_err(path, lineno, "record missing question_id")),
        };
        let text = rec
            .answer_text
            .ok_or_else(|| parse_err(path, lineno, "record missing answer_text"))?;
        let label = match rec.label {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(parse_err(path, lineno, "label must be a string or index")),
            None => return Err(parse_err(path, lineno, "record missing label")),
        };
        out.push(check_example(path, lineno, &qid, &text, &label, scheme)?);
    }
    Ok(out)
}

/// Writes examples with label names from `scheme`.
pub fn write_examples(path: &Path, format: FileFormat, scheme: &LabelScheme, examples: &[Example]) -> Result<()> {
    let name = |e: &Example| {
        scheme
            .name(e.gold_label)
            .ok_or_else(|| Error::invalid(format!("label {} outside scheme", e.gold_label)))
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        FileFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
            w.write_record(["question_id", "answer_text", "label"]).map_err(csv_err)?;
            for e in examples {
                w.write_record([e.question_id.as_str(), e.answer_text.as_str(), name(e)?])
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        FileFormat::JsonLines => {
            let mut w = BufWriter::new(file);
            for e in examples {
                let rec = serde_json::json!({
                    "question_id": e.question_id,
                    "answer_text": e.answer_text,
                    "label": name(e)?,
                });
                writeln!(w, "{rec}").map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Unigrams followed by adjacent bigrams (joined by a single space).
pub fn ngrams(text: &str) -> Vec<String> {
    let toks = tokenize(text);
    let bigrams: Vec<String> = toks.windows(2).map(|w| format!("{} {}", w[0], w[1])).collect();
    toks.into_iter().chain(bigrams).collect()
}

/// Hashed bag of unigrams and bigrams in `2^bits` buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    bits: u32,
}

impl Featurizer {
    pub const MIN_BITS: u32 = 2;
    pub const MAX_BITS: u32 = 24;

    pub fn new(bits: u32) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!(
                "feature bits must be in {}..={}, got {bits}",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        1 << self.bits
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) & (self.dim() as u64 - 1)) as usize
    }

    pub fn featurize(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for tok in ngrams(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm = crate::numerics::l2_norm(&v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn featurize_all(&self, examples: &[Example]) -> Vec<FeaturizedExample> {
        examples
            .iter()
            .map(|e| FeaturizedExample {
                features: self.featurize(&e.answer_text),
                example: e.clone(),
            })
            .collect()
    }
}

pub fn featurize(text: &str, bits: u32) -> Result<Vec<f64>> {
    Ok(Featurizer::new(bits)?.featurize(text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedExample {
    pub example: Example,
    pub features: Vec<f64>,
}

impl FeaturizedExample {
    pub fn label(&self) -> usize {
        self.example.gold_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub split_seed: u64,
}

/// Largest-remainder rounding of `total * ratios[i]` to integers summing
/// to `total`.
fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<[f64; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !x.is_finite() || x <= 0.0) {
        return Err(Error::Config(format!("split ratios must be positive, got {r:?}")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {r:?}")));
    }
    Ok(r)
}

/// Label-stratified split. Overall split sizes are the rounded ratios of
/// the whole dataset; each class is spread across the splits in proportion.
pub fn split(data: &[Example], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let r = check_ratios(ratios)?;
    let mut rng = RandomStream::derive(seed, 0x5e11);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in data.iter().enumerate() {
        by_class.entry(e.gold_label).or_default().push(i);
    }
    for idx in by_class.values_mut() {
        rng.shuffle(idx);
    }

    // Integer transport: class totals on one side, split totals on the other.
    let split_totals = apportion(data.len(), &r);
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let mut alloc = vec![[0usize; 3]; classes.len()];
    let mut class_left = Vec::new();
    let mut frac = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        let n = by_class[c].len();
        for s in 0..3 {
            let ideal = n as f64 * r[s];
            alloc[ci][s] = ideal.floor() as usize;
            frac.push((ideal - ideal.floor(), ci, s));
        }
        class_left.push(n - alloc[ci].iter().sum::<usize>());
    }
    let mut split_left: Vec<usize> = (0..3)
        .map(|s| split_totals[s] - alloc.iter().map(|a| a[s]).sum::<usize>())
        .collect();
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for pass in 0..2 {
        for &(f, ci, s) in &frac {
            if pass == 0 && f <= 0.0 {
                continue;
            }
            if class_left[ci] > 0 && split_left[s] > 0 {
                alloc[ci][s] += 1;
                class_left[ci] -= 1;
                split_left[s] -= 1;
            }
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (ci, c) in classes.iter().enumerate() {
        let idx = &by_class[c];
        let (a, b) = (alloc[ci][0], alloc[ci][0] + alloc[ci][1]);
        parts[0].extend_from_slice(&idx[..a]);
        parts[1].extend_from_slice(&idx[a..b]);
        parts[2].extend_from_slice(&idx[b..]);
    }
    finish_split(data, parts, seed)
}

/// Splits by question id so that test questions are never seen in training.
pub fn split_by_question(data: &[Example], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let r = check_ratios(ratios)?;
    let mut rng = RandomStream::derive(seed, 0x5e12);
    let mut questions: Vec<&str> = data
        .iter()
        .map(|e| e.question_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    rng.shuffle(&mut questions);
    let counts = apportion(questions.len(), &r);
    let mut assign: BTreeMap<&str, usize> = BTreeMap::new();
    let mut k = 0;
    for (s, &n) in counts.iter().enumerate() {
        for q in &questions[k..k + n] {
            assign.insert(q, s);
        }
        k += n;
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, e) in data.iter().enumerate() {
        parts[assign[e.question_id.as_str()]].push(i);
    }
    finish_split(data, parts, seed)
}

fn finish_split(data: &[Example], mut parts: [Vec<usize>; 3], seed: u64) -> Result<DatasetSplit> {
    for (name, p) in ["train", "validation", "test"].iter().zip(&parts) {
        if p.is_empty() {
            return Err(Error::Config(format!("{name} split would be empty")));
        }
    }
    // Keep source order within each split.
    let take = |p: &mut Vec<usize>| {
        p.sort_unstable();
        p.iter().map(|&i| data[i].clone()).collect::<Vec<_>>()
    };
    Ok(DatasetSplit {
        train: take(&mut parts[0]),
        validation: take(&mut parts[1]),
        test: take(&mut parts[2]),
        split_seed: seed,
    })
}

/// Configuration for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_questions: usize,
    pub examples_per_question: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Probability, per question, that an example's label is flipped to a
    /// different class. Each entry in `[0, 0.5]`.
    pub per_question_noise: Vec<f64>,
    /// Number of distinct content words in each class prototype.
    #[serde(default = "default_prototype_words")]
    pub feature_dim: usize,
    /// Content words per answer.
    #[serde(default = "default_answer_words")]
    pub answer_words: usize,
    /// Probability that a content word comes from the answer's class
    /// prototype rather than the question's shared vocabulary.
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_num_classes() -> usize {
    NUM_CLASSES
}
fn default_prototype_words() -> usize {
    6
}
fn default_answer_words() -> usize {
    3
}
fn default_signal() -> f64 {
    0.6
}

impl SyntheticConfig {
    /// 20 questions x 200 answers, label noise spread evenly over
    /// `[0, 0.45]`.
    pub fn default_corpus(seed: u64) -> Self {
        let q = 20;
        Self {
            num_questions: q,
            examples_per_question: 200,
            num_classes: NUM_CLASSES,
            per_question_noise: (0..q).map(|i| 0.45 * i as f64 / (q - 1) as f64).collect(),
            feature_dim: default_prototype_words(),
            answer_words: default_answer_words(),
            signal: default_signal(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_questions == 0 || self.examples_per_question == 0 {
            return Err(Error::Config("synthetic corpus must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.per_question_noise.len() != self.num_questions {
            return Err(Error::Config(format!(
                "per_question_noise has {} entries for {} questions",
                self.per_question_noise.len(),
                self.num_questions
            )));
        }
        if let Some((q, p)) = self
            .per_question_noise
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=0.5).contains(*p))
        {
            return Err(Error::Config(format!("noise for question {q} is {p}, outside [0, 0.5]")));
        }
        if self.feature_dim == 0 || self.answer_words == 0 {
            return Err(Error::Config("feature_dim and answer_words must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::Config(format!("signal {} outside [0, 1]", self.signal)));
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "sa", "du", "fi", "go", "hu", "ja", "be",
];

fn pseudo_word(rng: &mut RandomStream) -> String {
    let n = 2 + rng.below(2);
    (0..n).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect()
}

/// Generates examples question by question.
///
/// Each question has a stem (two words shared by all of its answers), a
/// shared vocabulary, and one prototype vocabulary per class. Content
/// words come from the true class prototype with probability `signal` and
/// from the shared vocabulary otherwise, so answers that draw no prototype
/// word carry no class evidence. The recorded label is then flipped to a
/// uniformly chosen different class with the question's noise probability.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = RandomStream::derive(config.seed, 0x5717);
    let mut out = Vec::with_capacity(config.num_questions * config.examples_per_question);
    for (q, &noise) in config.per_question_noise.iter().enumerate() {
        let stem = format!("q{q}stem q{q}topic");
        let shared: Vec<String> = (0..config.feature_dim).map(|_| pseudo_word(&mut rng)).collect();
        let prototypes: Vec<Vec<String>> = (0..config.num_classes)
            .map(|c| {
                (0..config.feature_dim)
                    .map(|w| format!("{}{q}c{c}w{w}", pseudo_word(&mut rng)))
                    .collect()
            })
            .collect();
        for _ in 0..config.examples_per_question {
            let true_class = rng.below(config.num_classes);
            let mut words = vec![stem.clone()];
            for _ in 0..config.answer_words {
                let pool = if rng.bernoulli(config.signal) {
                    &prototypes[true_class]
                } else {
                    &shared
                };
                words.push(pool[rng.below(pool.len())].clone());
            }
            let label = if rng.bernoulli(noise) {
                let shift = 1 + rng.below(config.num_classes - 1);
                (true_class + shift) % config.num_classes
            } else {
                true_class
            };
            out.push(Example {
                question_id: format!("q{q}"),
                answer_text: words.join(" "),
                gold_label: label,
            });
        }
    }
    Ok(out)
}

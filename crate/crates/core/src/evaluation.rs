//! Automatic metrics, correlation, manual-judgement aggregation and the
//! Monte Carlo permutation test.
//!
//! ROUGE works on lowercase whitespace words with leading and trailing
//! punctuation stripped. SentenceSim uses the same split but keeps case so
//! the embedding lookup can try the exact form first.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("series is constant; correlation undefined")]
    ConstantSeries,
    #[error("title {title_id:?} has {count} judgement(s); at least 2 required")]
    TooFewJudgements { title_id: String, count: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn strip(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Lowercase words with surrounding punctuation removed.
pub fn rouge_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| strip(w).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Words with surrounding punctuation removed, case kept.
pub fn sim_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| strip(w).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, gen_total: usize, ref_total: usize) -> Self {
        if gen_total == 0 || ref_total == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / gen_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || words.len() < n {
        return out;
    }
    for w in words.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
    }
    out
}

/// Clipped n-gram overlap. `n = 0` yields zeros.
pub fn rouge_n<S: AsRef<str>>(generated: &[S], reference: &[S], n: usize) -> RougeScore {
    let g = ngram_counts(generated, n);
    let r = ngram_counts(reference, n);
    let overlap = g
        .iter()
        .map(|(k, &c)| c.min(r.get(k).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, g.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(generated: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_counts(lcs_len(generated, reference), generated.len(), reference.len())
}

/// Word vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<(), EvalError> {
        if vector.len() != self.dim {
            return Err(EvalError::Invalid(format!(
                "vector of length {} in a store of dimension {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    /// Parses `"<count> <dim>"` followed by `"<token> <v1> ... <vdim>"` lines.
    pub fn from_reader<R: Read>(mut reader: R) -> Result<Self, EvalError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EvalError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        let [count, dim] = head[..] else {
            return Err(EvalError::Parse {
                line: 1,
                message: "header must be \"<count> <dim>\"".into(),
            });
        };
        let mut store = Self::new(dim);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default();
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| EvalError::Parse {
                    line: i + 1,
                    message: format!("bad number: {e}"),
                })?;
            if v.len() != dim {
                return Err(EvalError::Parse {
                    line: i + 1,
                    message: format!("expected {dim} values, found {}", v.len()),
                });
            }
            store.vectors.insert(token.to_string(), v);
        }
        if store.vectors.len() != count {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("header announces {count} vectors, found {}", store.vectors.len()),
            });
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact lookup, then the lowercased form.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors
            .get(word)
            .or_else(|| self.vectors.get(&word.to_lowercase()))
            .map(Vec::as_slice)
    }
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceSim {
    pub score: f64,
    /// Embeddable generated words that entered the mean.
    pub n_used: usize,
    pub skipped_generated: usize,
    pub skipped_reference: usize,
    /// Set when nothing could be compared and the score defaulted to 0.
    pub warning: bool,
}

/// Mean over generated words of the best cosine similarity to any reference
/// word. Words without a (non-zero) vector are skipped on both sides.
pub fn sentence_sim<S: AsRef<str>>(
    generated: &[S],
    reference: &[S],
    store: &EmbeddingStore,
) -> SentenceSim {
    let embed = |ws: &[S]| -> (Vec<Vec<f64>>, usize) {
        let vs: Vec<Vec<f64>> = ws
            .iter()
            .filter_map(|w| store.get(w.as_ref()).and_then(unit))
            .collect();
        let skipped = ws.len() - vs.len();
        (vs, skipped)
    };
    let (gen, skipped_generated) = embed(generated);
    let (refs, skipped_reference) = embed(reference);
    if gen.is_empty() || refs.is_empty() {
        return SentenceSim {
            score: 0.0,
            n_used: 0,
            skipped_generated,
            skipped_reference,
            warning: true,
        };
    }
    let total: f64 = gen
        .iter()
        .map(|x| {
            refs.iter()
                .map(|y| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    SentenceSim {
        score: total / gen.len() as f64,
        n_used: gen.len(),
        skipped_generated,
        skipped_reference,
        warning: false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    #[default]
    Spearman,
    Pearson,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantSeries);
    }
    // sqrt of the product keeps identical series at exactly 1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn correlation(xs: &[f64], ys: &[f64], method: CorrelationMethod) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite value in series".into()));
    }
    match method {
        CorrelationMethod::Pearson => pearson(xs, ys),
        CorrelationMethod::Spearman => pearson(&average_ranks(xs), &average_ranks(ys)),
    }
}

/// Permutations drawn from one RNG stream.
const PERM_BLOCK: usize = 1024;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One-sided Monte Carlo test of `mean(A) > mean(B)`.
///
/// Returns `(1 + #{permuted difference >= observed}) / (n_perms + 1)`.
/// Permutations are drawn in blocks, each from its own ChaCha stream keyed
/// by `seed` and the block index, so sequential and parallel runs agree.
pub fn permutation_test(
    group_a: &[f64],
    group_b: &[f64],
    n_perms: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64, EvalError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(EvalError::Invalid("both groups must be non-empty".into()));
    }
    if n_perms == 0 {
        return Err(EvalError::Invalid("n_perms must be >= 1".into()));
    }
    if group_a.iter().chain(group_b).any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite value in group".into()));
    }
    let observed = mean(group_a) - mean(group_b);
    // summation order changes under shuffling; equal differences must still count
    let tol = 1e-9 * (1.0 + observed.abs());
    let pooled: Vec<f64> = group_a.iter().chain(group_b).copied().collect();
    let na = group_a.len();
    let n_blocks = n_perms.div_ceil(PERM_BLOCK);
    let counts = exec.map_range(n_blocks, |block| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        let mut buf = pooled.clone();
        let todo = PERM_BLOCK.min(n_perms - block * PERM_BLOCK);
        let mut hits = 0usize;
        for _ in 0..todo {
            buf.shuffle(&mut rng);
            if mean(&buf[..na]) - mean(&buf[na..]) >= observed - tol {
                hits += 1;
            }
        }
        hits
    });
    let hits: usize = counts.into_iter().sum();
    Ok((1 + hits) as f64 / (n_perms + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualJudgement {
    pub title_id: String,
    pub judge_id: String,
    pub grammar_ok: u8,
    pub false_info: u8,
    pub quality: u8,
}

impl ManualJudgement {
    pub fn validate(&self) -> Result<(), String> {
        if self.grammar_ok > 1 {
            return Err(format!("grammar_ok must be 0 or 1, got {}", self.grammar_ok));
        }
        if self.false_info > 1 {
            return Err(format!("false_info must be 0 or 1, got {}", self.false_info));
        }
        if !(1..=5).contains(&self.quality) {
            return Err(format!("quality must be in 1..=5, got {}", self.quality));
        }
        Ok(())
    }
}

pub fn parse_judgements<R: Read>(reader: R) -> Result<Vec<ManualJudgement>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| EvalError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let expected = ["title_id", "judge_id", "grammar_ok", "false_info", "quality"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(EvalError::Parse {
            line: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ManualJudgement>().enumerate() {
        let line = i + 2;
        let j = rec.map_err(|e| EvalError::Parse {
            line,
            message: e.to_string(),
        })?;
        j.validate().map_err(|message| EvalError::Parse { line, message })?;
        out.push(j);
    }
    Ok(out)
}

pub fn load_judgements(path: impl AsRef<Path>) -> Result<Vec<ManualJudgement>, EvalError> {
    parse_judgements(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityBand {
    High,
    Medium,
    Low,
}

impl QualityBand {
    pub fn of(quality: f64) -> Self {
        if quality >= 4.5 {
            Self::High
        } else if quality >= 3.5 {
            Self::Medium
        } else {
            Self::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleJudgement {
    pub title_id: String,
    pub n_judges: usize,
    pub grammar_ok: f64,
    pub false_info: f64,
    pub quality: f64,
    pub band: QualityBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualAggregate {
    pub titles: Vec<TitleJudgement>,
    pub pct_grammar_ok: f64,
    pub pct_false_info: f64,
    pub mean_quality: f64,
}

/// Averages judges per title, then titles per corpus. Binary questions are
/// reported as percentages.
pub fn aggregate_manual(judgements: &[ManualJudgement]) -> Result<ManualAggregate, EvalError> {
    let mut by_title: BTreeMap<&str, Vec<&ManualJudgement>> = BTreeMap::new();
    for j in judgements {
        j.validate().map_err(EvalError::Invalid)?;
        by_title.entry(&j.title_id).or_default().push(j);
    }
    if by_title.is_empty() {
        return Err(EvalError::Invalid("no judgements".into()));
    }
    let mut titles = Vec::with_capacity(by_title.len());
    for (title_id, js) in by_title {
        if js.len() < 2 {
            return Err(EvalError::TooFewJudgements {
                title_id: title_id.to_string(),
                count: js.len(),
            });
        }
        let mut judges: Vec<&str> = js.iter().map(|j| j.judge_id.as_str()).collect();
        judges.sort_unstable();
        if judges.windows(2).any(|w| w[0] == w[1]) {
            return Err(EvalError::Invalid(format!(
                "title {title_id:?} judged twice by the same judge"
            )));
        }
        let n = js.len() as f64;
        let avg = |f: fn(&ManualJudgement) -> u8| js.iter().map(|j| f64::from(f(j))).sum::<f64>() / n;
        let quality = avg(|j| j.quality);
        titles.push(TitleJudgement {
            title_id: title_id.to_string(),
            n_judges: js.len(),
            grammar_ok: avg(|j| j.grammar_ok),
            false_info: avg(|j| j.false_info),
            quality,
            band: QualityBand::of(quality),
        });
    }
    let n = titles.len() as f64;
    Ok(ManualAggregate {
        pct_grammar_ok: 100.0 * titles.iter().map(|t| t.grammar_ok).sum::<f64>() / n,
        pct_false_info: 100.0 * titles.iter().map(|t| t.false_info).sum::<f64>() / n,
        mean_quality: titles.iter().map(|t| t.quality).sum::<f64>() / n,
        titles,
    })
}

/// A generated title next to its reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

pub fn parse_pairs<R: Read>(mut reader: R) -> Result<Vec<EvalPair>, EvalError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<EvalPair>, EvalError> {
    parse_pairs(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_sim: Option<SentenceSim>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub documents: Vec<DocumentScores>,
    pub mean: MeanScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manual: Option<ManualAggregate>,
}

pub fn score_pair(pair: &EvalPair, store: Option<&EmbeddingStore>) -> DocumentScores {
    let (g, r) = (rouge_words(&pair.generated), rouge_words(&pair.reference));
    DocumentScores {
        id: pair.id.clone(),
        rouge1: rouge_n(&g, &r, 1),
        rouge2: rouge_n(&g, &r, 2),
        rouge_l: rouge_l(&g, &r),
        sentence_sim: store.map(|s| sentence_sim(&sim_words(&pair.generated), &sim_words(&pair.reference), s)),
    }
}

fn mean_rouge<'a>(scores: impl Iterator<Item = &'a RougeScore>, n: f64) -> RougeScore {
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for s in scores {
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    RougeScore {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

/// Scores every pair (possibly in parallel) and averages in document order.
pub fn evaluate_pairs(
    pairs: &[EvalPair],
    store: Option<&EmbeddingStore>,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Invalid("no pairs to evaluate".into()));
    }
    let documents = exec.map(pairs, |p| score_pair(p, store));
    let n = documents.len() as f64;
    let mean = MeanScores {
        rouge1: mean_rouge(documents.iter().map(|d| &d.rouge1), n),
        rouge2: mean_rouge(documents.iter().map(|d| &d.rouge2), n),
        rouge_l: mean_rouge(documents.iter().map(|d| &d.rouge_l), n),
        sentence_sim: store.map(|_| {
            documents
                .iter()
                .map(|d| d.sentence_sim.map_or(0.0, |s| s.score))
                .sum::<f64>()
                / n
        }),
    };
    Ok(EvalReport {
        documents,
        mean,
        manual: None,
    })
}

/// Table-style summary with scores shown as percentages.
pub fn render_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("documents     {}\n", report.documents.len()));
    out.push_str(&format!("ROUGE-1       {:.2}\n", 100.0 * report.mean.rouge1.f1));
    out.push_str(&format!("ROUGE-2       {:.2}\n", 100.0 * report.mean.rouge2.f1));
    out.push_str(&format!("ROUGE-L       {:.2}\n", 100.0 * report.mean.rouge_l.f1));
    if let Some(s) = report.mean.sentence_sim {
        out.push_str(&format!("SentenceSim   {:.2}\n", 100.0 * s));
    }
    if let Some(m) = &report.manual {
        out.push_str(&format!("grammar ok    {:.2}%\n", m.pct_grammar_ok));
        out.push_str(&format!("false info    {:.2}%\n", m.pct_false_info));
        out.push_str(&format!("quality       {:.2}\n", m.mean_quality));
    }
    out
}

//! Next-token scoring contract used by the decoder, with two implementations.
//!
//! Any model that maps `(source, prefix)` to a log-distribution over the
//! vocabulary can drive the decoder. An encoder-decoder network plugs in by
//! implementing [`Scorer`] with a log-softmax over its output logits for the
//! last prefix position; the decoder never looks past this trait.
//!
//! [`TableScorer`] stores explicit distributions per prefix and is the
//! substrate for oracle tests. [`NGramScorer`] is an add-κ smoothed n-gram
//! model over titles with an optional copy bonus for source subtokens.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::tokenizer::TokenId;

/// Tolerance for `logsumexp(log_probs) == 0`.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("distribution has {got} entries, vocabulary has {expected}")]
    WrongSize { expected: usize, got: usize },
    #[error("distribution is not normalized: logsumexp = {0}")]
    NotNormalized(f64),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: TokenId, size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot train on an empty title list")]
    EmptyTraining,
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A proper log-probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    log_probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self, ScorerError> {
        let z = logsumexp(&log_probs);
        if !(z.abs() <= NORMALIZATION_TOLERANCE) || log_probs.iter().any(|x| x.is_nan() || *x > 0.0) {
            return Err(ScorerError::NotNormalized(z));
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self, ScorerError> {
        Self::from_log_probs(probs.iter().map(|p| p.ln()).collect())
    }

    /// Normalizes arbitrary finite scores with a log-softmax.
    pub fn from_logits(mut logits: Vec<f64>) -> Result<Self, ScorerError> {
        let z = logsumexp(&logits);
        logits.iter_mut().for_each(|x| *x -= z);
        Self::from_log_probs(logits)
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            log_probs: vec![-(size as f64).ln(); size],
        }
    }

    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.log_probs[id as usize]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

/// Next-token scorer. Implementations must be pure: identical inputs give
/// identical outputs, and calls may come from several threads at once.
pub trait Scorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// `prefix` starts with BOS.
    fn score_next(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<ScoreDistribution, ScorerError>;
}

fn check_ids(ids: &[TokenId], size: usize) -> Result<(), ScorerError> {
    match ids.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(ScorerError::InvalidId { id, size }),
        None => Ok(()),
    }
}

/// Explicit distributions keyed by the full prefix; unknown prefixes are uniform.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    vocab_size: usize,
    table: HashMap<Vec<TokenId>, ScoreDistribution>,
}

impl TableScorer {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, prefix: Vec<TokenId>, dist: ScoreDistribution) -> Result<(), ScorerError> {
        if dist.len() != self.vocab_size {
            return Err(ScorerError::WrongSize {
                expected: self.vocab_size,
                got: dist.len(),
            });
        }
        check_ids(&prefix, self.vocab_size)?;
        self.table.insert(prefix, dist);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Scorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score_next(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<ScoreDistribution, ScorerError> {
        check_ids(source, self.vocab_size)?;
        check_ids(prefix, self.vocab_size)?;
        Ok(self
            .table
            .get(prefix)
            .cloned()
            .unwrap_or_else(|| ScoreDistribution::uniform(self.vocab_size)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NGramParams {
    pub order: usize,
    /// Add-κ smoothing constant, > 0.
    pub kappa: f64,
    /// Additive log-space bonus for subtokens present in the source, ≥ 0.
    pub copy_bonus: f64,
}

impl Default for NGramParams {
    fn default() -> Self {
        Self {
            order: 3,
            kappa: 0.1,
            copy_bonus: 0.0,
        }
    }
}

impl NGramParams {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.order < 1 {
            return Err(ScorerError::InvalidParameter("order must be >= 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(ScorerError::InvalidParameter("kappa must be > 0".into()));
        }
        if !(self.copy_bonus >= 0.0 && self.copy_bonus.is_finite()) {
            return Err(ScorerError::InvalidParameter("copy_bonus must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramScorer {
    params: NGramParams,
    vocab_size: usize,
    bos: TokenId,
    eos: TokenId,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

const MAGIC: &str = "HEADLINER-NGRAM v1";

/// Counts n-grams over titles padded as `BOS^(n-1) title EOS`.
pub fn train_ngram(
    titles: &[Vec<TokenId>],
    params: NGramParams,
    vocab_size: usize,
    bos: TokenId,
    eos: TokenId,
) -> Result<NGramScorer, ScorerError> {
    params.validate()?;
    if titles.is_empty() {
        return Err(ScorerError::EmptyTraining);
    }
    check_ids(&[bos, eos], vocab_size)?;
    let ctx_len = params.order - 1;
    let mut counts: BTreeMap<Vec<TokenId>, ContextCounts> = BTreeMap::new();
    for title in titles {
        check_ids(title, vocab_size)?;
        let mut seq = vec![bos; ctx_len];
        seq.extend_from_slice(title);
        seq.push(eos);
        for i in ctx_len..seq.len() {
            let entry = counts.entry(seq[i - ctx_len..i].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(seq[i]).or_default() += 1;
        }
    }
    Ok(NGramScorer {
        params,
        vocab_size,
        bos,
        eos,
        counts,
    })
}

impl NGramScorer {
    pub fn params(&self) -> NGramParams {
        self.params
    }

    pub fn with_copy_bonus(mut self, copy_bonus: f64) -> Result<Self, ScorerError> {
        self.params.copy_bonus = copy_bonus;
        self.params.validate()?;
        Ok(self)
    }

    fn context(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let ctx_len = self.params.order - 1;
        let tail = &prefix[prefix.len().saturating_sub(ctx_len)..];
        let mut ctx = vec![self.bos; ctx_len - tail.len()];
        ctx.extend_from_slice(tail);
        ctx
    }

    /// Smoothed log-probabilities for a context, without the copy bonus.
    fn base_log_probs(&self, ctx: &[TokenId]) -> Vec<f64> {
        let kappa = self.params.kappa;
        let v = self.vocab_size as f64;
        match self.counts.get(ctx) {
            None => vec![-(v.ln()); self.vocab_size],
            Some(c) => {
                let denom = c.total as f64 + kappa * v;
                let unseen = (kappa / denom).ln();
                let mut lp = vec![unseen; self.vocab_size];
                for (&id, &n) in &c.next {
                    lp[id as usize] = ((n as f64 + kappa) / denom).ln();
                }
                lp
            }
        }
    }

    /// Per-token perplexity over titles (EOS included), copy bonus ignored.
    pub fn perplexity(&self, titles: &[Vec<TokenId>]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for title in titles {
            let mut prefix = vec![self.bos];
            for &tok in title.iter().chain(std::iter::once(&self.eos)) {
                let lp = self.base_log_probs(&self.context(&prefix));
                total += lp[tok as usize];
                n += 1;
                prefix.push(tok);
            }
        }
        if n == 0 {
            return f64::NAN;
        }
        (-total / n as f64).exp()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "order {}", self.params.order);
        let _ = writeln!(s, "kappa {:016x}", self.params.kappa.to_bits());
        let _ = writeln!(s, "copy_bonus {:016x}", self.params.copy_bonus.to_bits());
        let _ = writeln!(s, "vocab_size {}", self.vocab_size);
        let _ = writeln!(s, "bos {}", self.bos);
        let _ = writeln!(s, "eos {}", self.eos);
        let _ = writeln!(s, "contexts {}", self.counts.len());
        for (ctx, c) in &self.counts {
            let ctx_str: Vec<String> = ctx.iter().map(|t| t.to_string()).collect();
            let next: Vec<String> = c.next.iter().map(|(t, n)| format!("{t}:{n}")).collect();
            let _ = writeln!(s, "{}\t{}\t{}", ctx_str.join(" "), c.total, next.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ScorerError> {
        let mut lines = text.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, &str), ScorerError> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| ScorerError::Format {
                    line: 0,
                    message: format!("missing {what}"),
                })
        };
        let err = |line: usize, message: String| ScorerError::Format { line, message };

        let (ln, magic) = next_line("header")?;
        if magic != MAGIC {
            return Err(err(ln, format!("bad magic header {magic:?}")));
        }
        let mut field = |name: &str| -> Result<(usize, String), ScorerError> {
            let (ln, l) = next_line(name)?;
            let value = l
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| err(ln, format!("expected field {name}")))?;
            Ok((ln, value.to_string()))
        };
        fn int<T: std::str::FromStr>(ln: usize, v: &str) -> Result<T, ScorerError> {
            v.parse().map_err(|_| ScorerError::Format {
                line: ln,
                message: format!("bad integer {v:?}"),
            })
        }
        fn float_bits(ln: usize, v: &str) -> Result<f64, ScorerError> {
            u64::from_str_radix(v, 16)
                .map(f64::from_bits)
                .map_err(|_| ScorerError::Format {
                    line: ln,
                    message: format!("bad float bits {v:?}"),
                })
        }
        let (l, v) = field("order")?;
        let order: usize = int(l, &v)?;
        let (l, v) = field("kappa")?;
        let kappa = float_bits(l, &v)?;
        let (l, v) = field("copy_bonus")?;
        let copy_bonus = float_bits(l, &v)?;
        let (l, v) = field("vocab_size")?;
        let vocab_size: usize = int(l, &v)?;
        let (l, v) = field("bos")?;
        let bos: TokenId = int(l, &v)?;
        let (l, v) = field("eos")?;
        let eos: TokenId = int(l, &v)?;
        let (l, v) = field("contexts")?;
        let n_ctx: usize = int(l, &v)?;
        let params = NGramParams {
            order,
            kappa,
            copy_bonus,
        };
        params.validate()?;

        let mut counts = BTreeMap::new();
        for _ in 0..n_ctx {
            let (ln, l) = next_line("context line")?;
            let mut parts = l.split('\t');
            let (Some(ctx), Some(total), Some(next)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(ln, "expected three tab-separated fields".into()));
            };
            let ctx: Vec<TokenId> = ctx
                .split_whitespace()
                .map(|t| int(ln, t))
                .collect::<Result<_, _>>()?;
            if ctx.len() != order - 1 {
                return Err(err(ln, format!("context length {} != {}", ctx.len(), order - 1)));
            }
            let mut c = ContextCounts {
                total: int(ln, total)?,
                next: BTreeMap::new(),
            };
            for pair in next.split_whitespace() {
                let (t, n) = pair
                    .split_once(':')
                    .ok_or_else(|| err(ln, format!("bad count {pair:?}")))?;
                c.next.insert(int(ln, t)?, int(ln, n)?);
            }
            check_ids(&ctx, vocab_size)?;
            check_ids(&c.next.keys().copied().collect::<Vec<_>>(), vocab_size)?;
            if c.next.values().sum::<u64>() != c.total {
                return Err(err(ln, "context total does not match its counts".into()));
            }
            counts.insert(ctx, c);
        }
        Ok(Self {
            params,
            vocab_size,
            bos,
            eos,
            counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl Scorer for NGramScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score_next(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<ScoreDistribution, ScorerError> {
        check_ids(source, self.vocab_size)?;
        check_ids(prefix, self.vocab_size)?;
        let mut lp = self.base_log_probs(&self.context(prefix));
        let bonus = self.params.copy_bonus;
        if bonus > 0.0 && !source.is_empty() {
            let mut present = vec![false; self.vocab_size];
            for &t in source {
                if t != self.bos && t != self.eos {
                    present[t as usize] = true;
                }
            }
            for (x, p) in lp.iter_mut().zip(&present) {
                if *p {
                    *x += bonus;
                }
            }
            let z = logsumexp(&lp);
            lp.iter_mut().for_each(|x| *x -= z);
        }
        ScoreDistribution::from_log_probs(lp)
    }
}

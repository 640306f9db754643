//! Penalty-shaped beam search.
//!
//! Every live beam is expanded over the whole vocabulary. Extensions that
//! would repeat an n-gram or the previous word are dropped; the rest are
//! ranked by [`composite_score`] at their current length and the best
//! `beam_size` survive. A beam finishes when it emits EOS; a beam holding
//! `max_len` content subtokens can only emit EOS. Ties are broken by the
//! token-id sequence, so output does not depend on thread scheduling.
//!
//! [`exhaustive_search`] enumerates the same search space without pruning
//! and is the reference the beam search is tested against.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::penalties::{composite_score, KeywordMatch, PenaltyError, PenaltyParams};
use crate::scorer::{Scorer, ScorerError};
use crate::tokenizer::{self, TokenId, Vocab};

/// Upper bound on prefixes the exhaustive search will visit.
pub const EXHAUSTIVE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("scorer failed: {0}")]
    Scorer(#[from] ScorerError),
    #[error("invalid penalty parameters: {0}")]
    Penalty(#[from] PenaltyError),
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("scorer returned {got} log-probs for a vocabulary of {expected}")]
    DistributionSize { expected: usize, got: usize },
    #[error("exhaustive search would visit {0} prefixes, above the limit of {EXHAUSTIVE_LIMIT}")]
    SearchSpaceTooLarge(u128),
    #[error("internal invariant violated: {0}")]
    Invariant(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of content subtokens (EOS excluded).
    pub max_len: usize,
    pub penalty: PenaltyParams,
    pub blocked_ngram_orders: Vec<usize>,
    pub block_repeat_words: bool,
    pub n_best: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            max_len: 20,
            penalty: PenaltyParams::default(),
            blocked_ngram_orders: vec![2, 3],
            block_repeat_words: true,
            n_best: 1,
            execution: Execution::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        self.penalty.validate()?;
        if self.beam_size < 1 {
            return Err(DecodeError::Config("beam_size must be >= 1".into()));
        }
        if self.max_len < 1 {
            return Err(DecodeError::Config("max_len must be >= 1".into()));
        }
        if self.n_best < 1 || self.n_best > self.beam_size {
            return Err(DecodeError::Config(format!(
                "n_best must be in 1..={}, got {}",
                self.beam_size, self.n_best
            )));
        }
        if self.blocked_ngram_orders.contains(&0) {
            return Err(DecodeError::Config("n-gram orders must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which ids play structural roles during decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRoles {
    pub bos: TokenId,
    pub eos: TokenId,
    /// Never generated (PAD, BOS, UNK for a file vocabulary).
    pub suppressed: Vec<TokenId>,
    /// `continuation[id]` marks pieces that extend the previous word.
    /// Ids beyond the end count as word-initial.
    pub continuation: Vec<bool>,
}

impl TokenRoles {
    /// Every id except BOS is a word-initial, generatable token.
    pub fn plain(bos: TokenId, eos: TokenId) -> Self {
        Self {
            bos,
            eos,
            suppressed: vec![bos],
            continuation: Vec::new(),
        }
    }

    pub fn from_vocab(vocab: &Vocab) -> Self {
        Self {
            bos: tokenizer::BOS,
            eos: tokenizer::EOS,
            suppressed: vec![tokenizer::PAD, tokenizer::BOS, tokenizer::UNK],
            continuation: vocab.continuation_mask().to_vec(),
        }
    }

    pub fn is_continuation(&self, id: TokenId) -> bool {
        self.continuation.get(id as usize).copied().unwrap_or(false)
    }

    fn generatable(&self, vocab_size: usize) -> Vec<TokenId> {
        (0..vocab_size as TokenId)
            .filter(|t| *t != self.eos && !self.suppressed.contains(t))
            .collect()
    }
}

/// A keyword as the decoder sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub subtokens: Vec<TokenId>,
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Starts with BOS; ends with EOS once finished.
    pub tokens: Vec<TokenId>,
    pub cum_log_prob: f64,
    pub matches: Vec<KeywordMatch>,
    pub finished: bool,
}

impl Beam {
    pub fn start(bos: TokenId) -> Self {
        Self {
            tokens: vec![bos],
            cum_log_prob: 0.0,
            matches: Vec::new(),
            finished: false,
        }
    }

    /// Generated subtokens, BOS and EOS excluded.
    pub fn content(&self) -> &[TokenId] {
        let end = if self.finished {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }

    /// Length used by the penalties: everything after BOS, EOS included.
    pub fn penalty_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, params: &PenaltyParams) -> f64 {
        composite_score(self.cum_log_prob, self.penalty_len(), &self.matches, params)
    }
}

/// True iff appending `candidate` repeats the previous word's initial
/// subtoken (when repeat blocking is on) or recreates a blocked-order
/// n-gram already present in the generated tokens. EOS is never blocked.
pub fn is_blocked(beam: &Beam, candidate: TokenId, config: &DecodeConfig, roles: &TokenRoles) -> bool {
    if candidate == roles.eos {
        return false;
    }
    let content = &beam.tokens[1..];
    if config.block_repeat_words && !roles.is_continuation(candidate) {
        let last_initial = content.iter().rev().find(|&&t| !roles.is_continuation(t));
        if last_initial == Some(&candidate) {
            return true;
        }
    }
    if !content.contains(&candidate) {
        return false;
    }
    config.blocked_ngram_orders.iter().any(|&n| {
        if n > content.len() + 1 {
            return false;
        }
        let head = &content[content.len() + 1 - n..];
        content
            .windows(n)
            .any(|w| w[n - 1] == candidate && w[..n - 1] == *head)
    })
}

/// Keyword occurrences completed by the last token of `content`.
fn completed_matches(content: &[TokenId], keywords: &[KeywordSpec]) -> Vec<KeywordMatch> {
    keywords
        .iter()
        .enumerate()
        .filter(|(_, k)| !k.subtokens.is_empty() && content.ends_with(&k.subtokens))
        .map(|(i, k)| KeywordMatch {
            keyword_index: i,
            rank: k.rank,
            match_pos: content.len() - k.subtokens.len(),
        })
        .collect()
}

/// Records keyword occurrences completed by the beam's most recent token.
pub fn match_keywords(beam: &Beam, keywords: &[KeywordSpec]) -> Vec<KeywordMatch> {
    let mut matches = beam.matches.clone();
    matches.extend(completed_matches(beam.content(), keywords));
    matches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Content subtokens (no BOS, no EOS).
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub beam: Beam,
}

struct Expansion {
    parent: usize,
    token: TokenId,
    cum_log_prob: f64,
    new_matches: Vec<KeywordMatch>,
    score: f64,
}

fn check_distribution(len: usize, vocab_size: usize) -> Result<(), DecodeError> {
    if len != vocab_size {
        return Err(DecodeError::DistributionSize {
            expected: vocab_size,
            got: len,
        });
    }
    Ok(())
}

fn expand(
    beam: &Beam,
    parent: usize,
    source: &[TokenId],
    scorer: &dyn Scorer,
    config: &DecodeConfig,
    roles: &TokenRoles,
    keywords: &[KeywordSpec],
    generatable: &[TokenId],
) -> Result<Vec<Expansion>, DecodeError> {
    let dist = scorer.score_next(source, &beam.tokens)?;
    check_distribution(dist.len(), scorer.vocab_size())?;
    let new_len = beam.tokens.len();
    let at_limit = beam.content().len() >= config.max_len;
    let content_tokens: &[TokenId] = if at_limit { &[] } else { generatable };

    let mut out = Vec::with_capacity(content_tokens.len() + 1);
    let mut scratch = beam.tokens[1..].to_vec();
    let mut matches_buf = beam.matches.clone();
    for &token in std::iter::once(&roles.eos).chain(content_tokens) {
        if is_blocked(beam, token, config, roles) {
            continue;
        }
        let cum_log_prob = beam.cum_log_prob + dist.log_prob(token);
        let new_matches = if token == roles.eos {
            Vec::new()
        } else {
            scratch.push(token);
            let m = completed_matches(&scratch, keywords);
            scratch.pop();
            m
        };
        matches_buf.truncate(beam.matches.len());
        matches_buf.extend_from_slice(&new_matches);
        let score = composite_score(cum_log_prob, new_len, &matches_buf, &config.penalty);
        out.push(Expansion {
            parent,
            token,
            cum_log_prob,
            new_matches,
            score,
        });
    }
    Ok(out)
}

fn rank_order(a_score: f64, a_tokens: (&[TokenId], TokenId), b_score: f64, b_tokens: (&[TokenId], TokenId)) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.0.cmp(b_tokens.0))
        .then_with(|| a_tokens.1.cmp(&b_tokens.1))
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.beam.tokens.cmp(&b.beam.tokens))
}

/// Beam search returning up to `n_best` finished candidates, best first.
pub fn decode(
    source: &[TokenId],
    scorer: &dyn Scorer,
    config: &DecodeConfig,
    roles: &TokenRoles,
    keywords: &[KeywordSpec],
) -> Result<Vec<Candidate>, DecodeError> {
    config.validate()?;
    if source.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    let generatable = roles.generatable(scorer.vocab_size());
    let mut live = vec![Beam::start(roles.bos)];
    let mut finished: Vec<Candidate> = Vec::new();

    while !live.is_empty() {
        let indexed: Vec<(usize, &Beam)> = live.iter().enumerate().collect();
        let per_beam = config.execution.try_map(&indexed, |&(i, beam)| {
            expand(beam, i, source, scorer, config, roles, keywords, &generatable)
        })?;
        let mut pool: Vec<Expansion> = per_beam.into_iter().flatten().collect();
        let cmp = |a: &Expansion, b: &Expansion| {
            rank_order(
                a.score,
                (&live[a.parent].tokens, a.token),
                b.score,
                (&live[b.parent].tokens, b.token),
            )
        };
        if pool.len() > config.beam_size {
            pool.select_nth_unstable_by(config.beam_size - 1, cmp);
            pool.truncate(config.beam_size);
        }
        pool.sort_by(cmp);

        let mut next = Vec::with_capacity(pool.len());
        for e in pool {
            let parent = &live[e.parent];
            let mut tokens = Vec::with_capacity(parent.tokens.len() + 1);
            tokens.extend_from_slice(&parent.tokens);
            tokens.push(e.token);
            let mut matches = parent.matches.clone();
            matches.extend(e.new_matches);
            let beam = Beam {
                tokens,
                cum_log_prob: e.cum_log_prob,
                matches,
                finished: e.token == roles.eos,
            };
            if beam.finished {
                finished.push(Candidate {
                    tokens: beam.content().to_vec(),
                    score: e.score,
                    beam,
                });
            } else {
                next.push(beam);
            }
        }
        live = next;
    }

    if finished.is_empty() {
        return Err(DecodeError::Invariant("beam search produced no finished beam"));
    }
    finished.sort_by(candidate_order);
    finished.truncate(config.n_best);
    Ok(finished)
}

fn search_space(branching: usize, max_len: usize) -> u128 {
    let b = branching as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(b);
    }
    total
}

fn explore(
    beam: &Beam,
    source: &[TokenId],
    scorer: &dyn Scorer,
    config: &DecodeConfig,
    roles: &TokenRoles,
    keywords: &[KeywordSpec],
    generatable: &[TokenId],
    best: &mut Option<Candidate>,
) -> Result<(), DecodeError> {
    let dist = scorer.score_next(source, &beam.tokens)?;
    check_distribution(dist.len(), scorer.vocab_size())?;

    let mut done = beam.clone();
    done.tokens.push(roles.eos);
    done.cum_log_prob += dist.log_prob(roles.eos);
    done.finished = true;
    let candidate = Candidate {
        tokens: done.content().to_vec(),
        score: done.score(&config.penalty),
        beam: done,
    };
    if best
        .as_ref()
        .is_none_or(|b| candidate_order(&candidate, b) == Ordering::Less)
    {
        *best = Some(candidate);
    }

    if beam.content().len() >= config.max_len {
        return Ok(());
    }
    for &token in generatable {
        if is_blocked(beam, token, config, roles) {
            continue;
        }
        let mut child = beam.clone();
        child.tokens.push(token);
        child.cum_log_prob += dist.log_prob(token);
        child.matches = match_keywords(&child, keywords);
        explore(&child, source, scorer, config, roles, keywords, generatable, best)?;
    }
    Ok(())
}

/// Enumerates every EOS-terminated sequence of at most `max_len` content
/// subtokens that respects blocking, and returns the best by final
/// composite score. Refuses search spaces above [`EXHAUSTIVE_LIMIT`].
pub fn exhaustive_search(
    source: &[TokenId],
    scorer: &dyn Scorer,
    config: &DecodeConfig,
    roles: &TokenRoles,
    keywords: &[KeywordSpec],
) -> Result<Candidate, DecodeError> {
    config.validate()?;
    if source.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    let generatable = roles.generatable(scorer.vocab_size());
    let space = search_space(generatable.len(), config.max_len);
    if space > EXHAUSTIVE_LIMIT {
        return Err(DecodeError::SearchSpaceTooLarge(space));
    }

    // The root is handled here; each first-level subtree is an independent task.
    let root = Beam::start(roles.bos);
    let mut best = None;
    let mut leaf_only = config.clone();
    leaf_only.max_len = 0;
    explore(&root, source, scorer, &leaf_only, roles, keywords, &generatable, &mut best)?;

    let dist = scorer.score_next(source, &root.tokens)?;
    check_distribution(dist.len(), scorer.vocab_size())?;
    let firsts: Vec<TokenId> = generatable
        .iter()
        .copied()
        .filter(|&t| !is_blocked(&root, t, config, roles))
        .collect();
    let subtrees = config.execution.try_map(&firsts, |&token| {
        let mut child = root.clone();
        child.tokens.push(token);
        child.cum_log_prob += dist.log_prob(token);
        child.matches = match_keywords(&child, keywords);
        let mut sub_best = None;
        explore(&child, source, scorer, config, roles, keywords, &generatable, &mut sub_best)?;
        Ok::<_, DecodeError>(sub_best)
    })?;
    for c in subtrees.into_iter().flatten() {
        if best
            .as_ref()
            .is_none_or(|b| candidate_order(&c, b) == Ordering::Less)
        {
            best = Some(c);
        }
    }
    best.ok_or(DecodeError::Invariant("exhaustive search found no sequence"))
}

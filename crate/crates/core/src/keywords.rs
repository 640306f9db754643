//! Keyword candidates, their features, rank labels from reference titles,
//! and the ranking models that order keywords for the decoder.
//!
//! Entity recognition and search-volume lookups sit behind the
//! [`NerClient`] and [`VolumeClient`] traits. The crate ships file-backed
//! fixture clients and a capitalization heuristic; an HTTP backend only has
//! to implement the same traits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Article;
use crate::decoder::KeywordSpec;
use crate::tokenizer::{TokenId, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("timed out after {0} ms")]
    Timeout(u64),
}

#[derive(Debug, Error)]
pub enum KeywordError {
    #[error("keyword client failed for article {article_id:?}: {source}")]
    Client {
        article_id: String,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("no usable preference pairs in the training data")]
    NoPairs,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One entity as returned by a recognition backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerEntity {
    pub surface: String,
    pub relevance: f64,
    pub tag: String,
}

pub trait NerClient: Send + Sync {
    fn entities(&self, article: &Article) -> Result<Vec<NerEntity>, ClientError>;
}

/// Entities read from a JSON map `article_id -> [{surface, relevance, tag}]`.
/// Unknown articles have no entities.
#[derive(Debug, Clone, Default)]
pub struct FixtureNerClient {
    entities: HashMap<String, Vec<NerEntity>>,
}

impl FixtureNerClient {
    pub fn new(entities: HashMap<String, Vec<NerEntity>>) -> Self {
        Self { entities }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeywordError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    pub fn contains(&self, article_id: &str) -> bool {
        self.entities.contains_key(article_id)
    }
}

impl NerClient for FixtureNerClient {
    fn entities(&self, article: &Article) -> Result<Vec<NerEntity>, ClientError> {
        Ok(self.entities.get(&article.id).cloned().unwrap_or_default())
    }
}

const HEURISTIC_STOPWORDS: &[&str] = &[
    "Der", "Die", "Das", "Den", "Dem", "Des", "Ein", "Eine", "Einen", "Einem", "Einer", "Im", "In",
    "Am", "An", "Auf", "Aus", "Bei", "Mit", "Nach", "Von", "Vor", "Zu", "Zum", "Zur", "Für", "Über",
    "Und", "Oder", "Aber", "Doch", "Auch", "Es", "Er", "Sie", "Wir", "Ich", "Man", "Dies", "Diese",
    "Dieser", "Wie", "Was", "Wer", "Wo", "Wenn", "Als", "Laut", "Seit", "Nun", "Noch", "So", "The",
    "A", "An", "In", "On", "At", "It", "He", "She", "They", "We", "This", "That",
];

/// Runs of up to three capitalized words, minus common function words.
/// Relevance is the run's frequency relative to the most frequent run.
#[derive(Debug, Clone, Default)]
pub struct HeuristicNerClient;

impl NerClient for HeuristicNerClient {
    fn entities(&self, article: &Article) -> Result<Vec<NerEntity>, ClientError> {
        let stop: HashSet<&str> = HEURISTIC_STOPWORDS.iter().copied().collect();
        let raw: Vec<&str> = article.text.split_whitespace().collect();
        let words = match_words(&article.text);
        // punctuation after a word ends the run
        let closes = |i: usize| raw[i].ends_with(|c: char| !c.is_alphanumeric());
        let is_cap = |w: &str| {
            w.chars().next().is_some_and(char::is_uppercase) && !stop.contains(w)
        };
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        let mut i = 0;
        while i < words.len() {
            if !is_cap(words[i]) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < words.len() && j - i < 3 && !closes(j - 1) && is_cap(words[j]) {
                j += 1;
            }
            let surface = words[i..j].join(" ");
            first_seen.entry(surface.clone()).or_insert(i);
            *counts.entry(surface).or_default() += 1;
            i = j;
        }
        let max = counts.values().copied().max().unwrap_or(1) as f64;
        let mut out: Vec<NerEntity> = counts
            .into_iter()
            .map(|(surface, n)| NerEntity {
                tag: if surface.contains(' ') { "PROPN_PHRASE" } else { "PROPN" }.to_string(),
                relevance: n as f64 / max,
                surface,
            })
            .collect();
        out.sort_by_key(|e| first_seen[&e.surface]);
        Ok(out)
    }
}

/// Uses `primary`, and `fallback` when the primary returns nothing.
pub struct ChainedNerClient {
    pub primary: Box<dyn NerClient>,
    pub fallback: Box<dyn NerClient>,
}

impl NerClient for ChainedNerClient {
    fn entities(&self, article: &Article) -> Result<Vec<NerEntity>, ClientError> {
        let found = self.primary.entities(article)?;
        if found.is_empty() {
            self.fallback.entities(article)
        } else {
            Ok(found)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumePoint {
    pub date: NaiveDate,
    /// Relative search volume in [0, 100].
    pub volume: f64,
}

pub trait VolumeClient: Send + Sync {
    fn series(&self, keyword: &str) -> Result<Vec<VolumePoint>, ClientError>;
}

/// Volumes read from a JSON map `keyword -> [{date, volume}]`.
#[derive(Debug, Clone, Default)]
pub struct FixtureVolumeClient {
    series: HashMap<String, Vec<VolumePoint>>,
}

impl FixtureVolumeClient {
    pub fn new(series: HashMap<String, Vec<VolumePoint>>) -> Self {
        Self { series }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeywordError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }
}

impl VolumeClient for FixtureVolumeClient {
    fn series(&self, keyword: &str) -> Result<Vec<VolumePoint>, ClientError> {
        Ok(self.series.get(keyword).cloned().unwrap_or_default())
    }
}

fn volume_at(series: &[VolumePoint], date: NaiveDate) -> f64 {
    series
        .iter()
        .filter(|p| p.date <= date)
        .max_by_key(|p| p.date)
        .map_or(0.0, |p| p.volume)
}

/// Volume at `reference` (or the latest point when absent) and its relative
/// change against three days earlier: `(now - before) / max(1, before)`.
pub fn volume_features(series: &[VolumePoint], reference: Option<NaiveDate>) -> (f64, f64) {
    let Some(reference) = reference.or_else(|| series.iter().map(|p| p.date).max()) else {
        return (0.0, 0.0);
    };
    let now = volume_at(series, reference);
    let before = reference
        .checked_sub_days(Days::new(3))
        .map_or(0.0, |d| volume_at(series, d));
    (now, (now - before) / before.max(1.0))
}

/// Whitespace words with surrounding punctuation stripped; indices line up
/// with whitespace word positions.
pub fn match_words(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect()
}

fn phrase_positions(words: &[&str], phrase: &[&str]) -> Vec<usize> {
    let n = phrase.len();
    if n == 0 || words.len() < n {
        return Vec::new();
    }
    (0..=words.len() - n).filter(|&i| words[i..i + n] == *phrase).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCandidate {
    pub surface: String,
    pub subtokens: Vec<TokenId>,
    pub ner_relevance: f64,
    pub syntactic_tag: String,
    pub search_volume: f64,
    pub volume_delta_3d: f64,
    pub tfidf: f64,
    /// First occurrence word index over article word count; 1 when absent.
    pub first_pos_ratio: f64,
}

impl KeywordCandidate {
    /// A candidate with only its surface form; all features zero.
    pub fn bare(surface: &str, vocab: &Vocab) -> Result<Self, KeywordError> {
        Ok(Self {
            surface: surface.to_string(),
            subtokens: vocab.keyword_to_subtokens(surface)?,
            ner_relevance: 0.0,
            syntactic_tag: String::new(),
            search_volume: 0.0,
            volume_delta_3d: 0.0,
            tfidf: 0.0,
            first_pos_ratio: 1.0,
        })
    }
}

/// One candidate per distinct (case-sensitive) entity surface, in client order.
pub fn extract_candidates(
    article: &Article,
    ner: &dyn NerClient,
    vocab: &Vocab,
) -> Result<Vec<KeywordCandidate>, KeywordError> {
    let entities = ner.entities(article).map_err(|source| KeywordError::Client {
        article_id: article.id.clone(),
        source,
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in entities {
        let surface = crate::corpus::normalize_whitespace(&e.surface);
        if surface.is_empty() || !seen.insert(surface.clone()) {
            continue;
        }
        let mut c = KeywordCandidate::bare(&surface, vocab)?;
        c.ner_relevance = e.relevance.clamp(0.0, 1.0);
        c.syntactic_tag = e.tag;
        out.push(c);
    }
    Ok(out)
}

/// Document frequencies of words over a training corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentFrequencies {
    pub n_docs: u64,
    pub df: BTreeMap<String, u64>,
}

impl DocumentFrequencies {
    pub fn build(articles: &[Article]) -> Self {
        let mut df: BTreeMap<String, u64> = BTreeMap::new();
        for a in articles {
            let uniq: BTreeSet<&str> = match_words(&a.text).into_iter().filter(|w| !w.is_empty()).collect();
            for w in uniq {
                *df.entry(w.to_string()).or_default() += 1;
            }
        }
        Self {
            n_docs: articles.len() as u64,
            df,
        }
    }

    /// Single words use their exact count; a multi-word phrase uses the
    /// smallest count among its words.
    pub fn phrase_df(&self, phrase: &[&str]) -> u64 {
        phrase
            .iter()
            .map(|w| self.df.get(*w).copied().unwrap_or(0))
            .min()
            .unwrap_or(0)
    }

    pub fn idf(&self, phrase: &[&str]) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.phrase_df(phrase) as f64)).ln() + 1.0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KeywordError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeywordError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn compute_tfidf(surface: &str, article: &Article, df: &DocumentFrequencies) -> f64 {
    let words = match_words(&article.text);
    if words.is_empty() {
        return 0.0;
    }
    let phrase = match_words(surface);
    let count = phrase_positions(&words, &phrase).len();
    if count == 0 {
        return 0.0;
    }
    count as f64 / words.len() as f64 * df.idf(&phrase)
}

pub fn first_position_ratio(surface: &str, article: &Article) -> f64 {
    let words = match_words(&article.text);
    let phrase = match_words(surface);
    match phrase_positions(&words, &phrase).first().copied() {
        Some(i) => i as f64 / words.len() as f64,
        None => 1.0,
    }
}

/// Fills tf-idf, position and search-volume features in place.
pub fn populate_features(
    candidates: &mut [KeywordCandidate],
    article: &Article,
    df: &DocumentFrequencies,
    volumes: &dyn VolumeClient,
) -> Result<(), KeywordError> {
    for c in candidates.iter_mut() {
        c.tfidf = compute_tfidf(&c.surface, article, df);
        c.first_pos_ratio = first_position_ratio(&c.surface, article);
        let series = volumes.series(&c.surface).map_err(|source| KeywordError::Client {
            article_id: article.id.clone(),
            source,
        })?;
        let (vol, delta) = volume_features(&series, article.published_at);
        c.search_volume = vol.clamp(0.0, 100.0);
        c.volume_delta_3d = delta;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankLabel {
    pub surface: String,
    pub label: Option<u32>,
}

/// Labels candidates by where they first occur in the reference title.
/// Candidates starting at the same word are ordered longest surface first;
/// candidates absent from the title stay unlabeled. Output follows input order.
pub fn build_rank_labels(title: &str, candidates: &[KeywordCandidate]) -> Vec<RankLabel> {
    let title_words = match_words(title);
    let mut found: Vec<(usize, usize, usize, &str, usize)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let phrase = match_words(&c.surface);
        if let Some(pos) = phrase_positions(&title_words, &phrase).first().copied() {
            found.push((pos, phrase.len(), c.surface.chars().count(), c.surface.as_str(), i));
        }
    }
    found.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.cmp(&a.1))
            .then(b.2.cmp(&a.2))
            .then(a.3.cmp(b.3))
    });
    let mut labels: Vec<RankLabel> = candidates
        .iter()
        .map(|c| RankLabel {
            surface: c.surface.clone(),
            label: None,
        })
        .collect();
    for (rank, (.., idx)) in found.into_iter().enumerate() {
        labels[idx].label = Some(rank as u32);
    }
    labels
}

pub const NUMERIC_FEATURES: [&str; 5] = [
    "ner_relevance",
    "search_volume",
    "volume_delta_3d",
    "tfidf",
    "first_pos_ratio",
];

/// Numeric part of the feature vector; the syntactic tag is one-hot encoded
/// separately against the model's tag list.
pub fn numeric_features(c: &KeywordCandidate) -> [f64; 5] {
    [
        c.ner_relevance,
        c.search_volume / 100.0,
        c.volume_delta_3d.clamp(-5.0, 5.0),
        c.tfidf,
        c.first_pos_ratio,
    ]
}

/// Scores a candidate for ranking; higher is better.
pub trait KeywordRanker: Send + Sync {
    fn score(&self, article_id: &str, candidate: &KeywordCandidate) -> f64;
}

const MODEL_FORMAT: &str = "headliner-rank-model";
const MODEL_VERSION: u32 = 1;

/// Linear scoring model trained on pairwise preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub format: String,
    pub version: u32,
    pub numeric_features: Vec<String>,
    pub numeric_weights: Vec<f64>,
    pub tag_weights: BTreeMap<String, f64>,
}

impl Default for RankModel {
    fn default() -> Self {
        Self::zero(std::iter::empty::<String>())
    }
}

impl RankModel {
    pub fn zero<I: IntoIterator<Item = S>, S: Into<String>>(tags: I) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            numeric_features: NUMERIC_FEATURES.iter().map(|s| s.to_string()).collect(),
            numeric_weights: vec![0.0; NUMERIC_FEATURES.len()],
            tag_weights: tags.into_iter().map(|t| (t.into(), 0.0)).collect(),
        }
    }

    pub fn predict(&self, c: &KeywordCandidate) -> f64 {
        let x = numeric_features(c);
        let linear: f64 = x.iter().zip(&self.numeric_weights).map(|(a, b)| a * b).sum();
        linear + self.tag_weights.get(&c.syntactic_tag).copied().unwrap_or(0.0)
    }

    fn weights_vec(&self) -> Vec<f64> {
        let mut w = self.numeric_weights.clone();
        w.extend(self.tag_weights.values());
        w
    }

    fn set_weights(&mut self, w: &[f64]) {
        let n = self.numeric_weights.len();
        self.numeric_weights.copy_from_slice(&w[..n]);
        for (slot, v) in self.tag_weights.values_mut().zip(&w[n..]) {
            *slot = *v;
        }
    }

    fn feature_vec(&self, c: &KeywordCandidate) -> Vec<f64> {
        let mut x = numeric_features(c).to_vec();
        x.extend(self.tag_weights.keys().map(|t| if *t == c.syntactic_tag { 1.0 } else { 0.0 }));
        x
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KeywordError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeywordError> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(KeywordError::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        if m.numeric_weights.len() != NUMERIC_FEATURES.len() {
            return Err(KeywordError::Format("wrong number of numeric weights".into()));
        }
        Ok(m)
    }
}

impl KeywordRanker for RankModel {
    fn score(&self, _article_id: &str, candidate: &KeywordCandidate) -> f64 {
        self.predict(candidate)
    }
}

/// Externally computed scores: JSON map `article_id -> [{surface, score}]`.
/// Candidates without an imported score rank last.
#[derive(Debug, Clone, Default)]
pub struct ImportedScores {
    scores: HashMap<String, HashMap<String, f64>>,
}

#[derive(Deserialize)]
struct ImportedEntry {
    surface: String,
    score: f64,
}

impl ImportedScores {
    pub fn from_json(text: &str) -> Result<Self, KeywordError> {
        let raw: HashMap<String, Vec<ImportedEntry>> = serde_json::from_str(text)?;
        Ok(Self {
            scores: raw
                .into_iter()
                .map(|(id, es)| (id, es.into_iter().map(|e| (e.surface, e.score)).collect()))
                .collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KeywordError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl KeywordRanker for ImportedScores {
    fn score(&self, article_id: &str, candidate: &KeywordCandidate) -> f64 {
        self.scores
            .get(article_id)
            .and_then(|m| m.get(&candidate.surface))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedKeyword {
    pub candidate: KeywordCandidate,
    pub rank: u32,
    pub score: f64,
}

impl RankedKeyword {
    pub fn spec(&self) -> KeywordSpec {
        KeywordSpec {
            subtokens: self.candidate.subtokens.clone(),
            rank: self.rank,
        }
    }
}

/// Sorts by ranker score (descending, ties by surface) and assigns ranks 0..n.
pub fn rank_keywords(
    article_id: &str,
    candidates: Vec<KeywordCandidate>,
    ranker: &dyn KeywordRanker,
) -> Vec<RankedKeyword> {
    let mut scored: Vec<(f64, KeywordCandidate)> = candidates
        .into_iter()
        .map(|c| (ranker.score(article_id, &c), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.surface.cmp(&b.1.surface)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, candidate))| RankedKeyword {
            candidate,
            rank: i as u32,
            score,
        })
        .collect()
}

/// Drops excluded surfaces, moves pinned surfaces to the front in pin order
/// (creating bare candidates for pins that were not extracted), and re-ranks.
pub fn apply_pins(
    ranked: Vec<RankedKeyword>,
    pinned: &[String],
    excluded: &[String],
    vocab: &Vocab,
) -> Result<Vec<RankedKeyword>, KeywordError> {
    let excluded: HashSet<&str> = excluded.iter().map(String::as_str).collect();
    let mut rest: Vec<RankedKeyword> = ranked
        .into_iter()
        .filter(|k| !excluded.contains(k.candidate.surface.as_str()))
        .collect();
    let mut out = Vec::with_capacity(rest.len() + pinned.len());
    let mut pinned_seen = HashSet::new();
    for p in pinned {
        if excluded.contains(p.as_str()) || !pinned_seen.insert(p.as_str()) {
            continue;
        }
        match rest.iter().position(|k| k.candidate.surface == *p) {
            Some(i) => out.push(rest.remove(i)),
            None => out.push(RankedKeyword {
                candidate: KeywordCandidate::bare(p, vocab)?,
                rank: 0,
                score: f64::INFINITY,
            }),
        }
    }
    out.extend(rest);
    for (i, k) in out.iter_mut().enumerate() {
        k.rank = i as u32;
    }
    Ok(out)
}

/// Candidates of one article together with their title-derived labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledArticle {
    pub candidates: Vec<KeywordCandidate>,
    pub labels: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Pairs beyond this are subsampled with `seed`.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1.0,
            l2: 1e-4,
            max_pairs: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub n_pairs: usize,
    /// Loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

fn better(a: Option<u32>, b: Option<u32>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    }
}

fn pair_loss(w: &[f64], diffs: &[Vec<f64>], l2: f64) -> f64 {
    let data: f64 = diffs
        .iter()
        .map(|d| {
            let m: f64 = d.iter().zip(w).map(|(a, b)| a * b).sum();
            // log(1 + e^-m), stable for both signs
            if m > 0.0 {
                (-m).exp().ln_1p()
            } else {
                -m + m.exp().ln_1p()
            }
        })
        .sum::<f64>()
        / diffs.len() as f64;
    data + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>()
}

fn pair_grad(w: &[f64], diffs: &[Vec<f64>], l2: f64) -> Vec<f64> {
    let mut g: Vec<f64> = w.iter().map(|x| l2 * x).collect();
    let n = diffs.len() as f64;
    for d in diffs {
        let m: f64 = d.iter().zip(w).map(|(a, b)| a * b).sum();
        // d/dm log(1 + e^-m) = -sigmoid(-m)
        let s = 1.0 / (1.0 + m.exp());
        for (gi, di) in g.iter_mut().zip(d) {
            *gi -= s * di / n;
        }
    }
    g
}

/// Full-batch gradient descent on the pairwise logistic loss. Steps are
/// halved until the loss does not increase, so the per-epoch loss sequence
/// is non-increasing.
pub fn train_ranker(
    data: &[LabeledArticle],
    params: TrainParams,
) -> Result<(RankModel, TrainReport), KeywordError> {
    if !(params.learning_rate > 0.0 && params.l2 >= 0.0) {
        return Err(KeywordError::InvalidParameter(
            "learning_rate must be > 0 and l2 >= 0".into(),
        ));
    }
    let tags: BTreeSet<String> = data
        .iter()
        .flat_map(|a| a.candidates.iter().map(|c| c.syntactic_tag.clone()))
        .collect();
    let mut model = RankModel::zero(tags);

    let mut diffs: Vec<Vec<f64>> = Vec::new();
    for art in data {
        let feats: Vec<Vec<f64>> = art.candidates.iter().map(|c| model.feature_vec(c)).collect();
        for i in 0..art.candidates.len() {
            for j in 0..art.candidates.len() {
                if better(art.labels[i], art.labels[j]) {
                    diffs.push(feats[i].iter().zip(&feats[j]).map(|(a, b)| a - b).collect());
                }
            }
        }
    }
    if diffs.is_empty() {
        return Err(KeywordError::NoPairs);
    }
    if diffs.len() > params.max_pairs {
        diffs.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
        diffs.truncate(params.max_pairs);
    }

    let mut w = model.weights_vec();
    let mut loss = pair_loss(&w, &diffs, params.l2);
    let mut losses = vec![loss];
    for _ in 0..params.epochs {
        let g = pair_grad(&w, &diffs, params.l2);
        let mut step = params.learning_rate;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let trial_loss = pair_loss(&trial, &diffs, params.l2);
            if trial_loss <= loss {
                w = trial;
                loss = trial_loss;
                break;
            }
            step *= 0.5;
        }
        losses.push(loss);
    }
    model.set_weights(&w);
    Ok((
        model,
        TrainReport {
            n_pairs: diffs.len(),
            losses,
        },
    ))
}

/// Fraction of correctly ordered preference pairs.
pub fn pairwise_accuracy(model: &RankModel, data: &[LabeledArticle]) -> f64 {
    let (mut ok, mut total) = (0usize, 0usize);
    for art in data {
        let s: Vec<f64> = art.candidates.iter().map(|c| model.predict(c)).collect();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if better(art.labels[i], art.labels[j]) {
                    total += 1;
                    if s[i] > s[j] {
                        ok += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return f64::NAN;
    }
    ok as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;
    use rand::Rng;

    fn vocab() -> Vocab {
        build_vocab(
            ["Airbus A380 Boeing Brégier Fabrice zu früh Text abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ 0123456789"],
            100,
        )
    }

    fn cand(surface: &str) -> KeywordCandidate {
        KeywordCandidate::bare(surface, &vocab()).unwrap()
    }

    fn article(id: &str, text: &str) -> Article {
        Article::new(id, "Titel mit drei", text).unwrap()
    }

    struct FailingNer;
    impl NerClient for FailingNer {
        fn entities(&self, _: &Article) -> Result<Vec<NerEntity>, ClientError> {
            Err(ClientError::Timeout(500))
        }
    }

    fn ent(s: &str) -> NerEntity {
        NerEntity {
            surface: s.into(),
            relevance: 0.5,
            tag: "ORG".into(),
        }
    }

    #[test]
    fn fixture_extraction_and_dedup() {
        let a = article("a1", "Airbus baut die A380 nicht mehr");
        let fx = FixtureNerClient::new(HashMap::from([(
            "a1".to_string(),
            vec![ent("Airbus"), ent("A380"), ent("Boeing")],
        )]));
        assert_eq!(extract_candidates(&a, &fx, &vocab()).unwrap().len(), 3);
        let fx = FixtureNerClient::new(HashMap::from([(
            "a1".to_string(),
            vec![ent("Airbus"), ent("Airbus"), ent("airbus")],
        )]));
        let got = extract_candidates(&a, &fx, &vocab()).unwrap();
        assert_eq!(got.iter().map(|c| c.surface.as_str()).collect::<Vec<_>>(), ["Airbus", "airbus"]);
        assert!(extract_candidates(&article("zz", "x"), &fx, &vocab()).unwrap().is_empty());
    }

    #[test]
    fn client_failure_names_article() {
        let err = extract_candidates(&article("a7", "Text"), &FailingNer, &vocab()).unwrap_err();
        match err {
            KeywordError::Client { article_id, source } => {
                assert_eq!(article_id, "a7");
                assert!(matches!(source, ClientError::Timeout(500)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heuristic_ner_finds_capitalized_runs() {
        let a = article(
            "h",
            "Der Chef von Airbus, Fabrice Brégier, sagt: die A380 kam zu früh. Airbus bleibt.",
        );
        let ents = HeuristicNerClient.entities(&a).unwrap();
        let surfaces: Vec<&str> = ents.iter().map(|e| e.surface.as_str()).collect();
        assert!(surfaces.contains(&"Airbus"));
        assert!(surfaces.contains(&"Fabrice Brégier"));
        assert!(surfaces.contains(&"A380"));
        assert!(!surfaces.contains(&"Der"));
        let airbus = ents.iter().find(|e| e.surface == "Airbus").unwrap();
        assert_eq!(airbus.relevance, 1.0);
    }

    #[test]
    fn tfidf_values() {
        let df = DocumentFrequencies::build(&[article("d", "eins Airbus drei")]);
        let a = article("x", "Airbus b c d e f g h i j");
        assert!((compute_tfidf("Airbus", &a, &df) - 0.1).abs() < 1e-15);
        assert_eq!(compute_tfidf("Boeing", &a, &df), 0.0);
        // term in every document: idf floor of 1
        let df = DocumentFrequencies::build(&[article("d1", "Airbus"), article("d2", "Airbus x")]);
        assert_eq!(df.idf(&["Airbus"]), 1.0);
        // unseen term: ln(3/1) + 1
        assert!((df.idf(&["Boeing"]) - (3f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn position_and_volume_features() {
        let a = article("p", "eins zwei Airbus vier");
        assert_eq!(first_position_ratio("Airbus", &a), 0.5);
        assert_eq!(first_position_ratio("Boeing", &a), 1.0);
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        let series = vec![
            VolumePoint { date: d("2018-01-01"), volume: 20.0 },
            VolumePoint { date: d("2018-01-04"), volume: 50.0 },
        ];
        assert_eq!(volume_features(&series, Some(d("2018-01-04"))), (50.0, 1.5));
        assert_eq!(volume_features(&series, None), (50.0, 1.5));
        assert_eq!(volume_features(&series, Some(d("2018-01-02"))), (20.0, 20.0));
        assert_eq!(volume_features(&[], None), (0.0, 0.0));
    }

    #[test]
    fn rank_labels_follow_title_order() {
        let cands = vec![cand("A380"), cand("Airbus"), cand("Boeing")];
        let labels = build_rank_labels("Airbus A380 zu früh", &cands);
        let got: Vec<Option<u32>> = labels.iter().map(|l| l.label).collect();
        assert_eq!(got, [Some(1), Some(0), None]);
        assert!(build_rank_labels("nichts davon", &cands).iter().all(|l| l.label.is_none()));
    }

    #[test]
    fn overlapping_surfaces_prefer_longer() {
        let cands = vec![cand("Airbus"), cand("Airbus A380"), cand("A380")];
        let labels = build_rank_labels("Airbus A380 zu früh", &cands);
        let got: Vec<Option<u32>> = labels.iter().map(|l| l.label).collect();
        assert_eq!(got, [Some(1), Some(0), Some(2)]);
        let mut rev = cands.clone();
        rev.reverse();
        let labels_rev = build_rank_labels("Airbus A380 zu früh", &rev);
        for l in &labels {
            assert!(labels_rev.contains(l));
        }
    }

    #[test]
    fn rank_keywords_orders_by_model() {
        let mut model = RankModel::default();
        model.numeric_weights[3] = 1.0;
        let mut lo = cand("Airbus");
        lo.tfidf = 0.1;
        let mut hi = cand("Boeing");
        hi.tfidf = 0.3;
        let ranked = rank_keywords("a", vec![lo.clone(), hi], &model);
        assert_eq!(ranked[0].candidate.surface, "Boeing");
        assert_eq!(ranked.iter().map(|k| k.rank).collect::<Vec<_>>(), [0, 1]);
        let single = rank_keywords("a", vec![lo], &model);
        assert_eq!(single[0].rank, 0);
        // zero model: ties broken by surface
        let tie = rank_keywords("a", vec![cand("Boeing"), cand("A380")], &RankModel::default());
        assert_eq!(tie[0].candidate.surface, "A380");
    }

    #[test]
    fn imported_scores_override_model() {
        let imp = ImportedScores::from_json(
            r#"{"a": [{"surface": "Boeing", "score": 0.9}, {"surface": "Airbus", "score": 0.2}]}"#,
        )
        .unwrap();
        let ranked = rank_keywords("a", vec![cand("Airbus"), cand("A380"), cand("Boeing")], &imp);
        let order: Vec<&str> = ranked.iter().map(|k| k.candidate.surface.as_str()).collect();
        assert_eq!(order, ["Boeing", "Airbus", "A380"]);
    }

    #[test]
    fn pins_and_exclusions() {
        let ranked = rank_keywords(
            "a",
            vec![cand("Airbus"), cand("Boeing"), cand("Brégier")],
            &RankModel::default(),
        );
        let out = apply_pins(ranked, &["Brégier".into(), "A380".into()], &["Airbus".into()], &vocab()).unwrap();
        let order: Vec<(&str, u32)> = out.iter().map(|k| (k.candidate.surface.as_str(), k.rank)).collect();
        assert_eq!(order, [("Brégier", 0), ("A380", 1), ("Boeing", 2)]);
    }

    fn synthetic(n_articles: usize, seed: u64) -> Vec<LabeledArticle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_articles)
            .map(|_| {
                let mut cands: Vec<KeywordCandidate> = (0..5)
                    .map(|i| {
                        let mut c = cand(&format!("k{i}"));
                        c.tfidf = rng.random_range(0.0..1.0);
                        c.ner_relevance = rng.random_range(0.0..1.0);
                        c.first_pos_ratio = rng.random_range(0.0..1.0);
                        c.syntactic_tag = if rng.random_bool(0.5) { "PER" } else { "ORG" }.into();
                        c
                    })
                    .collect();
                cands.sort_by(|a, b| b.tfidf.total_cmp(&a.tfidf));
                // top three by tf-idf appear in the title
                let labels = (0..5).map(|i| (i < 3).then_some(i as u32)).collect();
                LabeledArticle { candidates: cands, labels }
            })
            .collect()
    }

    #[test]
    fn ranker_learns_separable_ordering() {
        let train = synthetic(60, 1);
        let test = synthetic(40, 2);
        let (model, report) = train_ranker(&train, TrainParams::default()).unwrap();
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        let acc = pairwise_accuracy(&model, &test);
        assert!(acc >= 0.95, "held-out pairwise accuracy {acc}");
    }

    #[test]
    fn zero_epochs_give_zero_model() {
        let train = synthetic(5, 3);
        let (model, report) = train_ranker(&train, TrainParams { epochs: 0, ..TrainParams::default() }).unwrap();
        assert!(model.numeric_weights.iter().all(|&w| w == 0.0));
        assert_eq!(report.losses.len(), 1);
        let scores: Vec<f64> = train[0].candidates.iter().map(|c| model.predict(c)).collect();
        assert!(scores.iter().all(|&s| s == scores[0]));
    }

    #[test]
    fn no_pairs_is_an_error() {
        let data = vec![LabeledArticle {
            candidates: vec![cand("a"), cand("b")],
            labels: vec![None, None],
        }];
        assert!(matches!(train_ranker(&data, TrainParams::default()), Err(KeywordError::NoPairs)));
    }

    #[test]
    fn model_file_round_trip() {
        let (model, _) = train_ranker(&synthetic(10, 4), TrainParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rank.json");
        model.save(&p).unwrap();
        let back = RankModel::load(&p).unwrap();
        assert_eq!(back, model);
        for art in synthetic(3, 5) {
            for c in &art.candidates {
                assert_eq!(back.predict(c).to_bits(), model.predict(c).to_bits());
            }
        }
        std::fs::write(&p, r#"{"format":"other","version":1,"numeric_features":[],"numeric_weights":[],"tag_weights":{}}"#).unwrap();
        assert!(matches!(RankModel::load(&p), Err(KeywordError::Format(_))));
    }
}

//! Article in, ranked keywords and candidate titles out.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::Article;
use crate::decoder::{decode, DecodeConfig, DecodeError, KeywordSpec, TokenRoles};
use crate::exec::Execution;
use crate::keywords::{
    apply_pins, build_rank_labels, extract_candidates, populate_features, rank_keywords,
    train_ranker, DocumentFrequencies, KeywordError, KeywordRanker, LabeledArticle, NerClient,
    RankModel, RankedKeyword, TrainParams, TrainReport, VolumeClient,
};
use crate::scorer::{train_ngram, NGramParams, NGramScorer, Scorer, ScorerError};
use crate::tokenizer::{build_vocab, TokenId, TokenizerError, Vocab, BOS, EOS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Keyword(#[from] KeywordError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOptions {
    pub config: DecodeConfig,
    /// When false the decoder sees no keywords and the rank penalty is inert.
    pub use_keywords: bool,
    pub pinned: Vec<String>,
    pub excluded: Vec<String>,
}

impl GenerateOptions {
    pub fn new(config: DecodeConfig) -> Self {
        Self {
            config,
            use_keywords: true,
            pinned: Vec::new(),
            excluded: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedTitle {
    pub title: String,
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub log_prob: f64,
    /// Surfaces of the keywords that occur in the title, in match order.
    pub matched_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub article_id: String,
    pub candidates: Vec<GeneratedTitle>,
    pub keywords: Vec<RankedKeyword>,
}

/// Immutable model state shared by the CLI and the service.
pub struct Generator {
    pub vocab: Vocab,
    pub scorer: Box<dyn Scorer>,
    pub ner: Box<dyn NerClient>,
    pub volumes: Box<dyn VolumeClient>,
    pub ranker: Box<dyn KeywordRanker>,
    pub df: DocumentFrequencies,
}

impl Generator {
    pub fn roles(&self) -> TokenRoles {
        TokenRoles::from_vocab(&self.vocab)
    }

    pub fn rank(&self, article: &Article) -> Result<Vec<RankedKeyword>, PipelineError> {
        let mut candidates = extract_candidates(article, self.ner.as_ref(), &self.vocab)?;
        populate_features(&mut candidates, article, &self.df, self.volumes.as_ref())?;
        Ok(rank_keywords(&article.id, candidates, self.ranker.as_ref()))
    }

    pub fn generate(&self, article: &Article, opts: &GenerateOptions) -> Result<Generation, PipelineError> {
        let ranked = self.rank(article)?;
        let keywords = apply_pins(ranked, &opts.pinned, &opts.excluded, &self.vocab)?;
        let specs: Vec<KeywordSpec> = if opts.use_keywords {
            keywords.iter().map(RankedKeyword::spec).collect()
        } else {
            Vec::new()
        };
        let source = self.vocab.encode(&article.text);
        let found = decode(&source, self.scorer.as_ref(), &opts.config, &self.roles(), &specs)?;
        let mut candidates = Vec::with_capacity(found.len());
        for c in found {
            let mut matched: Vec<String> = Vec::new();
            for m in &c.beam.matches {
                let s = &keywords[m.keyword_index].candidate.surface;
                if !matched.contains(s) {
                    matched.push(s.clone());
                }
            }
            candidates.push(GeneratedTitle {
                title: self.vocab.decode(&c.tokens)?,
                log_prob: c.beam.cum_log_prob,
                score: c.score,
                tokens: c.tokens,
                matched_keywords: matched,
            });
        }
        Ok(Generation {
            article_id: article.id.clone(),
            candidates,
            keywords,
        })
    }
}

/// Candidates with features and title-derived labels for each article.
pub fn label_articles(
    articles: &[Article],
    vocab: &Vocab,
    ner: &dyn NerClient,
    volumes: &dyn VolumeClient,
    df: &DocumentFrequencies,
    exec: Execution,
) -> Result<Vec<LabeledArticle>, KeywordError> {
    exec.try_map(articles, |a| {
        let mut candidates = extract_candidates(a, ner, vocab)?;
        populate_features(&mut candidates, a, df, volumes)?;
        let labels = build_rank_labels(&a.title, &candidates)
            .into_iter()
            .map(|l| l.label)
            .collect();
        Ok(LabeledArticle { candidates, labels })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    /// Whole words added to the vocabulary on top of the character pieces.
    pub vocab_words: usize,
    pub ngram: NGramParams,
    pub ranker: TrainParams,
    pub execution: Execution,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            vocab_words: 4000,
            ngram: NGramParams::default(),
            ranker: TrainParams::default(),
            execution: Execution::default(),
        }
    }
}

pub struct Fitted {
    pub generator: Generator,
    pub ngram: NGramScorer,
    pub rank_model: RankModel,
    pub rank_report: Option<TrainReport>,
}

/// Trains every artifact from a training split: vocabulary over titles and
/// texts, n-gram model over titles, document frequencies over texts and a
/// keyword ranker over title-derived labels. When no article yields a
/// preference pair the ranker stays at zero weights.
pub fn fit(
    train: &[Article],
    params: &FitParams,
    ner: Box<dyn NerClient>,
    volumes: Box<dyn VolumeClient>,
) -> Result<Fitted, PipelineError> {
    let vocab = build_vocab(
        train.iter().flat_map(|a| [a.title.as_str(), a.text.as_str()]),
        params.vocab_words,
    );
    let titles: Vec<Vec<TokenId>> = train.iter().map(|a| vocab.encode(&a.title)).collect();
    let ngram = train_ngram(&titles, params.ngram, vocab.len(), BOS, EOS)?;
    let df = DocumentFrequencies::build(train);
    let labeled = label_articles(train, &vocab, ner.as_ref(), volumes.as_ref(), &df, params.execution)?;
    let (rank_model, rank_report) = match train_ranker(&labeled, params.ranker) {
        Ok((m, r)) => (m, Some(r)),
        Err(KeywordError::NoPairs) => (RankModel::default(), None),
        Err(e) => return Err(e.into()),
    };
    let generator = Generator {
        vocab,
        scorer: Box::new(ngram.clone()),
        ner,
        volumes,
        ranker: Box::new(rank_model.clone()),
        df,
    };
    Ok(Fitted {
        generator,
        ngram,
        rank_model,
        rank_report,
    })
}

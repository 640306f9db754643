//! Article corpora: loading, length filtering, seeded splits and summary statistics.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid article: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: duplicate article id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("split needs {needed} articles but only {available} are available")]
    InsufficientArticles { needed: usize, available: usize },
    #[error("cannot compute statistics of an empty corpus")]
    Empty,
}

/// One news article with its reference SEO title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<NaiveDate>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    title: String,
    text: String,
    #[serde(default)]
    intro: Option<String>,
    #[serde(default)]
    department: Option<String>,
    #[serde(default)]
    published_at: Option<NaiveDate>,
}

/// Collapses whitespace runs to single spaces and trims both ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Number of maximal non-whitespace runs.
pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

impl Article {
    /// Builds a validated article. Text and title are whitespace-normalized.
    pub fn new(
        id: impl Into<String>,
        title: &str,
        text: &str,
    ) -> Result<Self, String> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err("empty id".into());
        }
        let title = normalize_whitespace(title);
        let text = normalize_whitespace(text);
        if title.is_empty() {
            return Err(format!("article {id:?} has an empty title"));
        }
        if text.is_empty() {
            return Err(format!("article {id:?} has an empty text"));
        }
        Ok(Self {
            id,
            title,
            text,
            department: None,
            published_at: None,
        })
    }

    pub fn body_words(&self) -> usize {
        word_count(&self.text)
    }

    pub fn title_words(&self) -> usize {
        word_count(&self.title)
    }
}

fn record_to_article(raw: RawRecord) -> Result<Article, String> {
    let text = match raw.intro.as_deref().map(str::trim) {
        Some(intro) if !intro.is_empty() => format!("{intro} {}", raw.text),
        _ => raw.text,
    };
    let mut article = Article::new(raw.id, &raw.title, &text)?;
    article.department = raw.department;
    article.published_at = raw.published_at;
    Ok(article)
}

/// Parses line-delimited JSON records. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus<R: Read>(reader: R) -> Result<Vec<Article>, CorpusError> {
    let mut seen = HashSet::new();
    let mut articles = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let article = record_to_article(raw).map_err(|message| CorpusError::Invalid {
            line: line_no,
            message,
        })?;
        if !seen.insert(article.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: article.id,
            });
        }
        articles.push(article);
    }
    Ok(articles)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Article>, CorpusError> {
    parse_corpus(File::open(path)?)
}

/// Writes articles back in the corpus format.
pub fn write_corpus<W: std::io::Write>(mut out: W, articles: &[Article]) -> std::io::Result<()> {
    for a in articles {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inclusive word-count bounds plus an optional department allowlist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterBounds {
    pub min_body_words: usize,
    pub max_body_words: usize,
    pub min_title_words: usize,
    pub max_title_words: usize,
    pub departments: Option<BTreeSet<String>>,
}

impl Default for FilterBounds {
    fn default() -> Self {
        Self {
            min_body_words: 30,
            max_body_words: 512,
            min_title_words: 3,
            max_title_words: 12,
            departments: None,
        }
    }
}

impl FilterBounds {
    pub fn accepts_body(&self, words: usize) -> bool {
        (self.min_body_words..=self.max_body_words).contains(&words)
    }

    pub fn accepts(&self, article: &Article) -> bool {
        let dept_ok = match &self.departments {
            None => true,
            Some(allowed) => article
                .department
                .as_ref()
                .is_some_and(|d| allowed.contains(d)),
        };
        dept_ok
            && self.accepts_body(article.body_words())
            && (self.min_title_words..=self.max_title_words).contains(&article.title_words())
    }
}

/// Keeps the articles within `bounds`, preserving order.
pub fn filter_articles(articles: &[Article], bounds: &FilterBounds) -> Vec<Article> {
    articles
        .iter()
        .filter(|a| bounds.accepts(a))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test_auto: usize,
    pub test_manual: usize,
}

impl SplitSizes {
    pub fn new(train: usize, validation: usize, test_auto: usize, test_manual: usize) -> Self {
        Self {
            train,
            validation,
            test_auto,
            test_manual,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test_auto + self.test_manual
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Article>,
    pub validation: Vec<Article>,
    pub test_auto: Vec<Article>,
    pub test_manual: Vec<Article>,
}

/// Seeded shuffle followed by a sequential partition.
pub fn split_corpus(
    articles: &[Article],
    sizes: SplitSizes,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    if sizes.total() > articles.len() {
        return Err(CorpusError::InsufficientArticles {
            needed: sizes.total(),
            available: articles.len(),
        });
    }
    let mut order: Vec<usize> = (0..articles.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = order.into_iter().map(|i| articles[i].clone());
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: take(sizes.train),
        validation: take(sizes.validation),
        test_auto: take(sizes.test_auto),
        test_manual: take(sizes.test_manual),
    })
}

const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "Dr.", "Prof.", "Hr.", "Fr.", "Nr.", "St.", "z.B.", "bzw.", "ca.", "usw.", "etc.", "vgl.",
    "Mio.", "Mrd.", "Jh.", "Abs.", "Str.", "u.a.", "d.h.", "v.a.", "Mr.", "Mrs.", "Ms.", "Jr.",
    "e.g.", "i.e.", "vs.", "Inc.", "Co.",
];

/// Rule-based sentence splitter: a boundary is `.`, `!` or `?` (optionally
/// followed by more terminators or closing quotes), then whitespace, then an
/// uppercase letter or digit, possibly behind an opening quote. A `.` ending
/// an allowlisted abbreviation is not a boundary.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | '”' | '’' | '“' | '»' | '«' | ')' | ']')
}

fn is_opening(c: char) -> bool {
    matches!(c, '"' | '\'' | '„' | '“' | '‘' | '«' | '»' | '(' | '[')
}

impl SentenceSplitter {
    pub fn with_abbreviations<I, S>(abbrevs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            abbreviations: abbrevs.into_iter().map(Into::into).collect(),
        }
    }

    /// One abbreviation per line; blank lines and `#` comments ignored.
    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::with_abbreviations(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from),
        ))
    }

    /// Byte offsets just past each sentence boundary (terminator plus closers).
    fn boundaries(&self, text: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if !is_terminator(c) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && (is_terminator(chars[j].1) || is_closing(chars[j].1)) {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            if k == j || k == chars.len() {
                i = j;
                continue;
            }
            while k < chars.len() && is_opening(chars[k].1) {
                k += 1;
            }
            let starts_sentence = chars
                .get(k)
                .is_some_and(|&(_, n)| n.is_uppercase() || n.is_ascii_digit());
            if starts_sentence && !(c == '.' && self.is_abbreviation(&text[..pos + 1])) {
                out.push(end);
            }
            i = j;
        }
        out
    }

    fn is_abbreviation(&self, upto_dot: &str) -> bool {
        let token_start = upto_dot
            .rfind(char::is_whitespace)
            .map_or(0, |p| p + upto_dot[p..].chars().next().map_or(1, char::len_utf8));
        let token = upto_dot[token_start..].trim_start_matches(is_opening);
        self.abbreviations.contains(token)
    }

    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut start = 0;
        for end in self.boundaries(text) {
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
        let rest = text[start..].trim();
        if !rest.is_empty() {
            out.push(rest);
        }
        out
    }

    pub fn count(&self, text: &str) -> usize {
        self.split(text).len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avg_article_words: f64,
    pub avg_article_sentences: f64,
    pub avg_title_words: f64,
    pub avg_title_sentences: f64,
}

pub fn corpus_stats(
    articles: &[Article],
    splitter: &SentenceSplitter,
) -> Result<CorpusStats, CorpusError> {
    if articles.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = articles.len() as f64;
    let mean = |f: &dyn Fn(&Article) -> usize| articles.iter().map(|a| f(a) as f64).sum::<f64>() / n;
    Ok(CorpusStats {
        n_docs: articles.len(),
        avg_article_words: mean(&|a| a.body_words()),
        avg_article_sentences: mean(&|a| splitter.count(&a.text)),
        avg_title_words: mean(&|a| a.title_words()),
        avg_title_sentences: mean(&|a| splitter.count(&a.title)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn art(id: &str, title_words: usize, body_words: usize) -> Article {
        Article::new(id, &words(title_words), &words(body_words)).unwrap()
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        assert!(parse_corpus("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn records_load_in_order() {
        let data = r#"{"id":"a1","title":"Erster Titel hier","text":"Text eins"}
{"id":"a2","title":"Zweiter Titel hier","text":"Text zwei","department":"politik","published_at":"2018-03-02"}
"#;
        let arts = parse_corpus(data.as_bytes()).unwrap();
        assert_eq!(arts.len(), 2);
        assert_eq!(arts[0].id, "a1");
        assert_eq!(arts[1].department.as_deref(), Some("politik"));
        assert_eq!(
            arts[1].published_at,
            Some(NaiveDate::from_ymd_opt(2018, 3, 2).unwrap())
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let data = "{\"id\":\"a1\",\"title\":\"t\",\"text\":\"x\"}\n{\"id\":\"a1\",\"title\":\"u\",\"text\":\"y\"}\n";
        match parse_corpus(data.as_bytes()) {
            Err(CorpusError::DuplicateId { line, id }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "a1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let data = "{\"id\":\"a1\",\"title\":\"t\",\"text\":\"x\"}\n\n{not json\n";
        match parse_corpus(data.as_bytes()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_title_is_invalid() {
        let data = "{\"id\":\"a1\",\"title\":\"   \",\"text\":\"x\"}\n";
        assert!(matches!(
            parse_corpus(data.as_bytes()),
            Err(CorpusError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn intro_is_prepended() {
        let data = "{\"id\":\"a\",\"title\":\"t\",\"intro\":\"Vorspann.\",\"text\":\"Rest  des\\nTexts\"}\n";
        let arts = parse_corpus(data.as_bytes()).unwrap();
        assert_eq!(arts[0].text, "Vorspann. Rest des Texts");
    }

    #[test]
    fn filter_boundaries_are_inclusive() {
        let b = FilterBounds::default();
        let kept = filter_articles(
            &[art("lo", 3, 30), art("big", 5, 513), art("longtitle", 13, 100)],
            &b,
        );
        let ids: Vec<_> = kept.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, ["lo"]);
    }

    #[test]
    fn department_allowlist() {
        let mut a = art("a", 5, 40);
        a.department = Some("sport".into());
        let b = art("b", 5, 40);
        let bounds = FilterBounds {
            departments: Some(["politik".to_string()].into()),
            ..FilterBounds::default()
        };
        assert!(filter_articles(&[a.clone(), b], &bounds).is_empty());
        a.department = Some("politik".into());
        assert_eq!(filter_articles(&[a], &bounds).len(), 1);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let arts: Vec<_> = (0..10).map(|i| art(&format!("a{i}"), 4, 40)).collect();
        let sizes = SplitSizes::new(6, 2, 1, 1);
        let s1 = split_corpus(&arts, sizes, 7).unwrap();
        let s2 = split_corpus(&arts, sizes, 7).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.train.len(), 6);
        assert_eq!(s1.test_manual.len(), 1);
    }

    #[test]
    fn zero_split_and_oversized_split() {
        let arts: Vec<_> = (0..5).map(|i| art(&format!("a{i}"), 4, 40)).collect();
        let s = split_corpus(&arts, SplitSizes::default(), 1).unwrap();
        assert_eq!(s, CorpusSplit::default());
        assert!(matches!(
            split_corpus(&arts, SplitSizes::new(6, 0, 0, 0), 1),
            Err(CorpusError::InsufficientArticles { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn sentence_splitter_rules() {
        let s = SentenceSplitter::default();
        assert_eq!(s.count("Das ist gut. Das auch!"), 2);
        assert_eq!(s.count("Dr. Müller kommt. Er bleibt."), 2);
        assert_eq!(s.count("Wer kommt? 2018 war besser."), 2);
        // lowercase continuation is not a boundary
        assert_eq!(s.count("Es kostet ca. fünf Euro."), 1);
        assert_eq!(s.count("Er sagte: \"Nein.\" Dann ging er."), 2);
        assert_eq!(s.count("Version 2.0 ist da"), 1);
        assert_eq!(s.count(""), 0);
        assert_eq!(
            s.split("Eins. Zwei? Drei"),
            vec!["Eins.", "Zwei?", "Drei"]
        );
    }

    #[test]
    fn abbreviation_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abbr.txt");
        std::fs::write(&p, "# comment\nGen.\n").unwrap();
        let s = SentenceSplitter::from_file(&p).unwrap();
        assert_eq!(s.count("Gen. Meyer spricht."), 1);
        assert_eq!(s.count("Dr. Meyer spricht."), 2);
    }

    #[test]
    fn stats_hand_counted() {
        let a = Article::new(
            "x",
            "Brücke endlich wieder offen",
            "Der Bürgermeister eröffnet heute die Brücke. Viele Bürger kommen auch.",
        )
        .unwrap();
        let st = corpus_stats(std::slice::from_ref(&a), &SentenceSplitter::default()).unwrap();
        assert_eq!(st.n_docs, 1);
        assert_eq!(
            (st.avg_article_words, st.avg_article_sentences, st.avg_title_words, st.avg_title_sentences),
            (10.0, 2.0, 4.0, 1.0)
        );
        let st2 = corpus_stats(&[a.clone(), a], &SentenceSplitter::default()).unwrap();
        assert_eq!(st2.avg_article_words, st.avg_article_words);
        assert_eq!(st2.n_docs, 2);
        assert!(matches!(
            corpus_stats(&[], &SentenceSplitter::default()),
            Err(CorpusError::Empty)
        ));
    }
}

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use headliner_core::corpus::{
    corpus_stats, filter_articles, load_corpus, normalize_whitespace, split_corpus, write_corpus,
    Article, SentenceSplitter, SplitSizes,
};
use headliner_core::decoder::DecodeConfig;
use headliner_core::evaluation::{
    aggregate_manual, evaluate_pairs, load_judgements, load_pairs, permutation_test, render_summary,
    EmbeddingStore,
};
use headliner_core::keywords::{
    ChainedNerClient, DocumentFrequencies, FixtureNerClient, FixtureVolumeClient,
    HeuristicNerClient, ImportedScores, KeywordRanker, NerClient, RankModel, VolumeClient,
};
use headliner_core::pipeline::{label_articles, GenerateOptions, Generator};
use headliner_core::scorer::{train_ngram, NGramParams, NGramScorer};
use headliner_core::tokenizer::{build_vocab, TokenId, Vocab, BOS, EOS};
use headliner_core::Execution;
use headliner_service::{file_version, AccessLog, AppState};

use crate::config::{optional_file, require_file, RunConfig};
use crate::error::CliError;
use crate::{
    BuildVocabArgs, Cli, Command, DecodeFlags, EvaluateArgs, GenerateArgs, IngestArgs,
    KeywordSources, PermtestArgs, RankArgs, ServeArgs, TrainLmArgs,
};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.sequential {
        cfg.sequential = true;
    }
    match cli.command {
        Command::Ingest(a) => ingest(&cfg, a),
        Command::BuildVocab(a) => build_vocab_cmd(&cfg, a),
        Command::TrainLm(a) => train_lm(&cfg, a),
        Command::RankKeywords(a) => rank_keywords_cmd(&cfg, a),
        Command::Generate(a) => generate(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Permtest(a) => permtest(&cfg, a),
        Command::Serve(a) => serve(&cfg, a),
    }
}

fn execution(cfg: &RunConfig) -> Execution {
    if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Writes one JSON line. A closed stdout (e.g. piped into `head`) ends the
/// process quietly instead of reporting an error.
fn emit<T: Serialize>(out: &mut impl Write, value: &T) -> Result<(), CliError> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    match out.write_all(&line).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        other => Ok(other?),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display(), e))
}

fn ingest(cfg: &RunConfig, a: IngestArgs) -> Result<(), CliError> {
    let input = require_file(&a.input, &cfg.paths.corpus, "corpus")?;
    let mut bounds = cfg.filter.clone();
    if let Some(v) = a.min_body_words {
        bounds.min_body_words = v;
    }
    if let Some(v) = a.max_body_words {
        bounds.max_body_words = v;
    }
    if let Some(v) = a.min_title_words {
        bounds.min_title_words = v;
    }
    if let Some(v) = a.max_title_words {
        bounds.max_title_words = v;
    }
    if !a.departments.is_empty() {
        bounds.departments = Some(a.departments.iter().cloned().collect::<BTreeSet<_>>());
    }
    let splitter = match optional_file(&a.abbreviations, &cfg.paths.abbreviations, "abbreviations")? {
        Some(p) => SentenceSplitter::from_file(&p).map_err(|e| CliError::io(p.display(), e))?,
        None => SentenceSplitter::default(),
    };

    let articles = load_corpus(&input).map_err(|e| prefix(&input, e.into()))?;
    let kept = filter_articles(&articles, &bounds);
    let mut out = create(&a.output)?;
    write_corpus(&mut out, &kept)?;
    out.flush()?;

    #[derive(Serialize)]
    struct IngestReport {
        read: usize,
        kept: usize,
        #[serde(flatten)]
        stats: headliner_core::corpus::CorpusStats,
    }
    let stats = corpus_stats(&kept, &splitter)?;
    let stdout = std::io::stdout();
    emit(
        &mut stdout.lock(),
        &IngestReport {
            read: articles.len(),
            kept: kept.len(),
            stats,
        },
    )?;

    if let Some(dir) = &a.split_dir {
        let sizes = match &a.split {
            Some(v) if v.len() == 4 => SplitSizes::new(v[0], v[1], v[2], v[3]),
            Some(v) => return Err(CliError::Usage(format!("--split takes 4 sizes, got {}", v.len()))),
            None => return Err(CliError::Usage("--split-dir needs --split".into())),
        };
        let split = split_corpus(&kept, sizes, a.seed.unwrap_or(cfg.seed))?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        for (name, part) in [
            ("train", &split.train),
            ("validation", &split.validation),
            ("test_auto", &split.test_auto),
            ("test_manual", &split.test_manual),
        ] {
            let mut f = create(&dir.join(format!("{name}.jsonl")))?;
            write_corpus(&mut f, part)?;
            f.flush()?;
        }
    }
    Ok(())
}

fn prefix(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn build_vocab_cmd(cfg: &RunConfig, a: BuildVocabArgs) -> Result<(), CliError> {
    let corpus = require_file(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let articles = load_corpus(&corpus).map_err(|e| prefix(&corpus, e.into()))?;
    let vocab = build_vocab(
        articles.iter().flat_map(|x| [x.title.as_str(), x.text.as_str()]),
        a.words.unwrap_or(cfg.vocab.words),
    );
    vocab.save(&a.output).map_err(|e| CliError::io(a.output.display(), e))?;
    emit(&mut std::io::stdout().lock(), &serde_json::json!({ "entries": vocab.len() }))
}

fn load_vocab(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<Vocab, CliError> {
    let p = require_file(flag, &cfg.paths.vocab, "vocabulary")?;
    Vocab::load(&p).map_err(|e| prefix(&p, e.into()))
}

fn train_lm(cfg: &RunConfig, a: TrainLmArgs) -> Result<(), CliError> {
    let corpus = require_file(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let vocab = load_vocab(&a.vocab, cfg)?;
    let articles = load_corpus(&corpus).map_err(|e| prefix(&corpus, e.into()))?;
    let mut params: NGramParams = cfg.ngram.into();
    if let Some(v) = a.order {
        params.order = v;
    }
    if let Some(v) = a.kappa {
        params.kappa = v;
    }
    if let Some(v) = a.copy_bonus {
        params.copy_bonus = v;
    }
    let titles: Vec<Vec<TokenId>> = articles.iter().map(|x| vocab.encode(&x.title)).collect();
    let model = train_ngram(&titles, params, vocab.len(), BOS, EOS)?;
    model.save(&a.output).map_err(|e| prefix(&a.output, e.into()))?;
    if let Some(df_path) = &a.df_output {
        DocumentFrequencies::build(&articles).save(df_path)?;
    }
    emit(
        &mut std::io::stdout().lock(),
        &serde_json::json!({
            "titles": titles.len(),
            "order": params.order,
            "perplexity": model.perplexity(&titles),
        }),
    )
}

struct KeywordTools {
    vocab: Vocab,
    ner: Box<dyn NerClient>,
    volumes: Box<dyn VolumeClient>,
    df: DocumentFrequencies,
}

fn keyword_tools(cfg: &RunConfig, s: &KeywordSources) -> Result<KeywordTools, CliError> {
    let vocab = load_vocab(&s.vocab, cfg)?;
    let heuristic: Box<dyn NerClient> = Box::new(HeuristicNerClient);
    let ner: Box<dyn NerClient> = match optional_file(&s.ner, &cfg.paths.ner, "entity fixture")? {
        Some(p) => Box::new(ChainedNerClient {
            primary: Box::new(FixtureNerClient::load(&p).map_err(|e| prefix(&p, e.into()))?),
            fallback: heuristic,
        }),
        None => heuristic,
    };
    let volumes = match optional_file(&s.volumes, &cfg.paths.volumes, "search volume fixture")? {
        Some(p) => FixtureVolumeClient::load(&p).map_err(|e| prefix(&p, e.into()))?,
        None => FixtureVolumeClient::default(),
    };
    let df = match optional_file(&s.df, &cfg.paths.df, "document frequency")? {
        Some(p) => DocumentFrequencies::load(&p).map_err(|e| prefix(&p, e.into()))?,
        None => DocumentFrequencies::default(),
    };
    Ok(KeywordTools {
        vocab,
        ner,
        volumes: Box::new(volumes),
        df,
    })
}

fn ranker(cfg: &RunConfig, s: &KeywordSources) -> Result<Box<dyn KeywordRanker>, CliError> {
    if let Some(p) = optional_file(&s.scores, &cfg.paths.scores, "keyword score")? {
        return Ok(Box::new(ImportedScores::load(&p).map_err(|e| prefix(&p, e.into()))?));
    }
    match optional_file(&s.rank_model, &cfg.paths.rank_model, "rank model")? {
        Some(p) => Ok(Box::new(RankModel::load(&p).map_err(|e| prefix(&p, e.into()))?)),
        None => Ok(Box::new(RankModel::default())),
    }
}

#[derive(Serialize)]
struct KeywordLine {
    surface: String,
    rank: u32,
    score: Option<f64>,
    search_volume: f64,
    tfidf: f64,
}

fn keyword_lines(ranked: &[headliner_core::keywords::RankedKeyword]) -> Vec<KeywordLine> {
    ranked
        .iter()
        .map(|k| KeywordLine {
            surface: k.candidate.surface.clone(),
            rank: k.rank,
            score: k.score.is_finite().then_some(k.score),
            search_volume: k.candidate.search_volume,
            tfidf: k.candidate.tfidf,
        })
        .collect()
}

fn rank_keywords_cmd(cfg: &RunConfig, a: RankArgs) -> Result<(), CliError> {
    let corpus = require_file(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let articles = load_corpus(&corpus).map_err(|e| prefix(&corpus, e.into()))?;
    let tools = keyword_tools(cfg, &a.sources)?;
    let exec = execution(cfg);

    let ranker: Box<dyn KeywordRanker> = match &a.train_output {
        Some(out) => {
            let labeled = label_articles(&articles, &tools.vocab, tools.ner.as_ref(), tools.volumes.as_ref(), &tools.df, exec)?;
            let mut params = cfg.ranker;
            if let Some(e) = a.epochs {
                params.epochs = e;
            }
            let (model, report) = headliner_core::keywords::train_ranker(&labeled, params)?;
            model.save(out)?;
            eprintln!(
                "trained ranker on {} pairs; loss {:.4} -> {:.4}",
                report.n_pairs,
                report.losses[0],
                report.losses.last().copied().unwrap_or(f64::NAN)
            );
            Box::new(model)
        }
        None => ranker(cfg, &a.sources)?,
    };

    let generator = Generator {
        vocab: tools.vocab,
        scorer: Box::new(headliner_core::scorer::TableScorer::new(1)),
        ner: tools.ner,
        volumes: tools.volumes,
        ranker,
        df: tools.df,
    };
    let ranked = exec.try_map(&articles, |art| generator.rank(art))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (art, r) in articles.iter().zip(ranked) {
        emit(
            &mut out,
            &serde_json::json!({ "article_id": art.id, "keywords": keyword_lines(&r) }),
        )?;
    }
    Ok(())
}

fn decode_config(cfg: &RunConfig, f: &DecodeFlags) -> DecodeConfig {
    let mut c = cfg.decode.clone();
    c.execution = execution(cfg);
    if let Some(v) = f.r {
        c.penalty.r = v;
    }
    if let Some(v) = f.alpha {
        c.penalty.alpha = v;
    }
    if let Some(v) = f.beta {
        c.penalty.beta = v;
    }
    if let Some(v) = f.position_scale {
        c.penalty.position_scale = v;
    }
    if let Some(v) = f.beam_size {
        c.beam_size = v;
    }
    if let Some(v) = f.n_best {
        c.n_best = v;
    }
    if let Some(v) = f.max_len {
        c.max_len = v;
    }
    c
}

#[derive(Deserialize)]
struct GenerateInput {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    text: String,
    #[serde(default)]
    intro: Option<String>,
    #[serde(default)]
    published_at: Option<NaiveDate>,
}

fn read_generate_inputs(path: &Path) -> Result<Vec<Article>, CliError> {
    let reader: Box<dyn Read> = if path == Path::new("-") {
        Box::new(std::io::stdin())
    } else {
        Box::new(File::open(path).map_err(|e| CliError::io(path.display(), e))?)
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerateInput = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let text = match rec.intro {
            Some(intro) => format!("{intro} {}", rec.text),
            None => rec.text,
        };
        let text = normalize_whitespace(&text);
        if text.is_empty() {
            return Err(CliError::Validation(format!("{} line {}: empty text", path.display(), i + 1)));
        }
        out.push(Article {
            id: rec.id.unwrap_or_else(|| format!("line-{}", i + 1)),
            title: rec.title.unwrap_or_default(),
            text,
            department: None,
            published_at: rec.published_at,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CandidateLine {
    title: String,
    score: f64,
    log_prob: f64,
    /// Content subtoken ids (no BOS, no EOS).
    token_ids: Vec<TokenId>,
    matched_keywords: Vec<String>,
}

#[derive(Serialize)]
struct GenerateLine {
    article_id: String,
    candidates: Vec<CandidateLine>,
    keywords: Vec<KeywordLine>,
}

fn load_generator(cfg: &RunConfig, model: &Option<PathBuf>, sources: &KeywordSources) -> Result<(Generator, PathBuf, PathBuf), CliError> {
    let model_path = require_file(model, &cfg.paths.model, "model")?;
    let vocab_path = require_file(&sources.vocab, &cfg.paths.vocab, "vocabulary")?;
    let tools = keyword_tools(cfg, sources)?;
    let scorer = NGramScorer::load(&model_path).map_err(|e| prefix(&model_path, e.into()))?;
    if headliner_core::scorer::Scorer::vocab_size(&scorer) != tools.vocab.len() {
        return Err(CliError::Validation(format!(
            "model {} was trained for a vocabulary of {} entries, {} has {}",
            model_path.display(),
            headliner_core::scorer::Scorer::vocab_size(&scorer),
            vocab_path.display(),
            tools.vocab.len()
        )));
    }
    let generator = Generator {
        vocab: tools.vocab,
        scorer: Box::new(scorer),
        ner: tools.ner,
        volumes: tools.volumes,
        ranker: ranker(cfg, sources)?,
        df: tools.df,
    };
    Ok((generator, model_path, vocab_path))
}

fn generate(cfg: &RunConfig, a: GenerateArgs) -> Result<(), CliError> {
    let (generator, _, _) = load_generator(cfg, &a.model, &a.sources)?;
    let articles = read_generate_inputs(&a.input)?;
    let config = decode_config(cfg, &a.decode);
    config.validate()?;
    let opts = GenerateOptions {
        config,
        use_keywords: !a.decode.no_keywords,
        pinned: Vec::new(),
        excluded: Vec::new(),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for art in &articles {
        let g = generator.generate(art, &opts)?;
        let line = GenerateLine {
            article_id: g.article_id,
            keywords: keyword_lines(&g.keywords),
            candidates: g
                .candidates
                .into_iter()
                .map(|c| CandidateLine {
                    title: c.title,
                    score: c.score,
                    log_prob: c.log_prob,
                    matched_keywords: c.matched_keywords,
                    token_ids: c.tokens,
                })
                .collect(),
        };
        emit(&mut out, &line)?;
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    if !a.pairs.is_file() {
        return Err(CliError::Validation(format!("pairs file {} does not exist", a.pairs.display())));
    }
    let store = if a.sentence_sim {
        let p = require_file(&a.embeddings, &cfg.paths.embeddings, "embedding")?;
        Some(EmbeddingStore::load(&p).map_err(|e| prefix(&p, e.into()))?)
    } else {
        None
    };
    let pairs = load_pairs(&a.pairs).map_err(|e| prefix(&a.pairs, e.into()))?;
    let mut report = evaluate_pairs(&pairs, store.as_ref(), execution(cfg))?;
    if let Some(p) = optional_file(&a.judgements, &cfg.paths.judgements, "judgement")? {
        let js = load_judgements(&p).map_err(|e| prefix(&p, e.into()))?;
        report.manual = Some(aggregate_manual(&js)?);
    }
    let warned = report
        .documents
        .iter()
        .filter(|d| d.sentence_sim.is_some_and(|s| s.warning))
        .count();
    if warned > 0 {
        tracing::warn!("{warned} pair(s) had no embeddable words; their SentenceSim is 0");
    }
    if let Some(out) = &a.report_out {
        let mut f = create(out)?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        f.flush()?;
    }
    eprint!("{}", render_summary(&report));
    emit(&mut std::io::stdout().lock(), &report.mean)
}

fn read_numbers(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn permtest(cfg: &RunConfig, a: PermtestArgs) -> Result<(), CliError> {
    let ga = read_numbers(&a.group_a)?;
    let gb = read_numbers(&a.group_b)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let p = permutation_test(&ga, &gb, a.n_perms, seed, execution(cfg))?;
    emit(
        &mut std::io::stdout().lock(),
        &serde_json::json!({
            "n_a": ga.len(),
            "n_b": gb.len(),
            "n_perms": a.n_perms,
            "seed": seed,
            "p_value": p,
        }),
    )
}

fn serve(cfg: &RunConfig, a: ServeArgs) -> Result<(), CliError> {
    let bind = a.bind.clone().unwrap_or_else(|| cfg.serve.bind.clone());
    let addr: std::net::SocketAddr = bind
        .parse()
        .map_err(|e| CliError::Validation(format!("bind address {bind:?}: {e}")))?;
    let log_path = a
        .access_log
        .clone()
        .or_else(|| cfg.paths.access_log.clone())
        .unwrap_or_else(|| PathBuf::from("access_log.jsonl"));
    let log = AccessLog::open(&log_path, a.fsync || cfg.serve.fsync)
        .map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut defaults = cfg.decode.clone();
    defaults.execution = execution(cfg);
    defaults.validate()?;
    let state = AppState::new(log, defaults, cfg.filter.clone());

    let (generator, model_path, vocab_path) = load_generator(cfg, &a.model, &a.sources)?;
    let model_version = file_version(&model_path)?;
    let vocab_version = file_version(&vocab_path)?;
    state.install(generator, model_version, vocab_version);

    let origins = if a.allowed_origins.is_empty() {
        cfg.serve.allowed_origins.clone()
    } else {
        a.allowed_origins.clone()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(headliner_service::serve(addr, state, &origins))
        .map_err(|e| CliError::Io(format!("serve on {addr}: {e}")))
}

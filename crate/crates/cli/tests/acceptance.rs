//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use headliner_core::corpus::{filter_articles, load_corpus, Article, FilterBounds};
use headliner_core::decoder::{decode, exhaustive_search, DecodeConfig, KeywordSpec, TokenRoles};
use headliner_core::evaluation::{
    correlation, permutation_test, rouge_l, rouge_n, rouge_words, sentence_sim, CorrelationMethod,
    EmbeddingStore,
};
use headliner_core::keywords::{ChainedNerClient, FixtureNerClient, FixtureVolumeClient, HeuristicNerClient};
use headliner_core::penalties::{composite_score, length_penalty, rank_penalty, KeywordMatch, PenaltyParams, RankCombine};
use headliner_core::pipeline::{fit, FitParams};
use headliner_core::scorer::{ScoreDistribution, TableScorer};
use headliner_core::tokenizer::{TokenId, Vocab};
use headliner_core::Execution;
use headliner_service::{router, AccessLog, AppState};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Outcome {
    check((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} ± {tol}"))
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    check(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn toy(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy").join(name)
}

fn penalty(r: u32, alpha: f64, beta: f64) -> PenaltyParams {
    PenaltyParams {
        r,
        alpha,
        beta,
        ..PenaltyParams::default()
    }
}

fn penalty_closed_forms() -> Outcome {
    let start = Instant::now();
    let p = penalty(12, 0.6, 1.5);
    close(length_penalty(12, &p), 1.933182, 1e-6, "lp(12)")?;
    close(length_penalty(6, &p), 1.515717, 1e-6, "lp(6)")?;
    close(length_penalty(18, &p), 1.515717, 1e-6, "lp(18)")?;
    close(rank_penalty(0, 0, &p), 5.481689, 1e-6, "rp(0,0)")?;
    // independent arithmetic: ((6 + θ) / 6)^α and 1 + e^β
    close(length_penalty(12, &p), (18.0f64 / 6.0).powf(0.6), 1e-12, "lp(12) closed form")?;
    close(rank_penalty(0, 0, &p), 1.0 + 1.5f64.exp(), 1e-12, "rp(0,0) closed form")?;
    let flat = penalty(12, 0.0, 1.5);
    for len in 0..40 {
        check(length_penalty(len, &flat) == 1.0, || format!("α=0 lp({len}) != 1"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))
}

fn length_symmetry() -> Outcome {
    for r in [4u32, 12, 20] {
        for alpha in [0.3, 0.6, 1.0] {
            let p = penalty(r, alpha, 1.5);
            for k in 0..r as usize {
                let (lo, hi) = (length_penalty(r as usize - k, &p), length_penalty(r as usize + k, &p));
                check(lo == hi, || format!("r={r} α={alpha} k={k}: {lo} != {hi}"))?;
            }
        }
    }
    Ok(())
}

const BOS: TokenId = 0;
const EOS: TokenId = 1;

/// Random distributions for every prefix reachable within `max_len` content tokens.
fn random_table(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> TableScorer {
    let mut table = TableScorer::new(vocab);
    let content: Vec<TokenId> = (2..vocab as TokenId).collect();
    let mut frontier = vec![vec![BOS]];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
            table
                .insert(prefix.clone(), ScoreDistribution::from_logits(logits).unwrap())
                .unwrap();
            if depth < max_len {
                for &t in &content {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push(p);
                }
            }
        }
        frontier = next;
    }
    table
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let roles = TokenRoles::plain(BOS, EOS);
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.random_range(3..=5usize);
        let max_len = rng.random_range(1..=6usize);
        let table = random_table(&mut rng, vocab, max_len);
        let content = vocab - 2;
        // wide enough that no expansion is ever pruned
        let beam_size = (content + 1).pow(max_len as u32 + 1);
        let n_kw = rng.random_range(1..=2usize);
        let keywords: Vec<KeywordSpec> = (0..n_kw)
            .map(|rank| KeywordSpec {
                subtokens: (0..rng.random_range(1..=2usize))
                    .map(|_| rng.random_range(2..vocab as TokenId))
                    .collect(),
                rank: rank as u32,
            })
            .collect();
        let blocking = rng.random_bool(0.5);
        let regimes = [
            ("no penalties", penalty(1, 0.0, 0.0), false),
            ("length", penalty(rng.random_range(1..=6), rng.random_range(0.3..1.0), 0.0), false),
            ("length+rank", penalty(rng.random_range(1..=6), rng.random_range(0.3..1.0), rng.random_range(0.0..3.0)), true),
        ];
        for (name, pen, with_keywords) in regimes {
            let config = DecodeConfig {
                beam_size,
                max_len,
                n_best: 1,
                penalty: PenaltyParams {
                    combine: if seed % 2 == 0 { RankCombine::Max } else { RankCombine::Product },
                    ..pen
                },
                blocked_ngram_orders: if blocking { vec![2, 3] } else { vec![] },
                block_repeat_words: blocking,
                ..DecodeConfig::default()
            };
            let kws: &[KeywordSpec] = if with_keywords { &keywords } else { &[] };
            let beam = decode(&[2], &table, &config, &roles, kws).map_err(|e| e.to_string())?;
            let best = exhaustive_search(&[2], &table, &config, &roles, kws).map_err(|e| e.to_string())?;
            check(beam[0].tokens == best.tokens, || {
                format!("seed {seed} {name}: beam {:?} vs oracle {:?}", beam[0].tokens, best.tokens)
            })?;
            close(beam[0].score, best.score, 1e-9, &format!("seed {seed} {name} score"))?;
            checked += 1;
        }
    }
    check(checked == 300, || format!("{checked} cases"))?;
    within(start.elapsed(), Duration::from_secs(60))
}

fn keyword_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let p = PenaltyParams {
            combine: if rng.random_bool(0.5) { RankCombine::Max } else { RankCombine::Product },
            ..penalty(rng.random_range(1..20), rng.random_range(0.0..1.5), rng.random_range(-2.0..5.0))
        };
        let cum = -rng.random_range(0.01..30.0);
        let len = rng.random_range(1..25usize);
        let rank = rng.random_range(1..8u32);
        let pos = rng.random_range(0..len);
        let with = |rank| [KeywordMatch { keyword_index: 0, rank, match_pos: pos }];
        let (before, after) = (
            composite_score(cum, len, &with(rank), &p),
            composite_score(cum, len, &with(rank - 1), &p),
        );
        check(after > before, || format!("{p:?} rank {rank}->{}: {before} !< {after}", rank - 1))?;
    }
    // with several matches under the product rule every rank counts
    let p = PenaltyParams {
        combine: RankCombine::Product,
        ..PenaltyParams::default()
    };
    let two = |r0, r1| {
        [
            KeywordMatch { keyword_index: 0, rank: r0, match_pos: 0 },
            KeywordMatch { keyword_index: 1, rank: r1, match_pos: 3 },
        ]
    };
    check(composite_score(-5.0, 8, &two(1, 4), &p) < composite_score(-5.0, 8, &two(1, 3), &p), || {
        "product rule not monotone".into()
    })?;

    // Designed fixture: after BOS, "plain" (id 2) has p=0.6 and the keyword
    // (id 3) p=0.1; both are then followed by EOS with certainty.
    let mut table = TableScorer::new(4);
    table.insert(vec![BOS], ScoreDistribution::from_probs(&[0.0, 0.3, 0.6, 0.1]).unwrap()).unwrap();
    for t in [2, 3] {
        table.insert(vec![BOS, t], ScoreDistribution::from_probs(&[0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
    }
    let roles = TokenRoles::plain(BOS, EOS);
    let keywords = [KeywordSpec { subtokens: vec![3], rank: 0 }];
    let order = |beta: f64| -> Result<Vec<Vec<TokenId>>, String> {
        let config = DecodeConfig {
            beam_size: 3,
            n_best: 3,
            max_len: 1,
            penalty: penalty(12, 0.6, beta),
            ..DecodeConfig::default()
        };
        let out = decode(&[2], &table, &config, &roles, &keywords).map_err(|e| e.to_string())?;
        Ok(out.into_iter().map(|c| c.tokens).collect())
    };
    let (low, high) = (order(0.0)?, order(5.0)?);
    let pos = |v: &[Vec<TokenId>], t: TokenId| v.iter().position(|c| c == &vec![t]);
    check(pos(&low, 2) < pos(&low, 3), || format!("β=0 order {low:?}"))?;
    check(pos(&high, 3) < pos(&high, 2), || format!("β=5 order {high:?}"))
}

fn rouge_fixtures() -> Outcome {
    let (g, r) = (rouge_words("a b c"), rouge_words("a b d"));
    check(rouge_n(&g, &r, 1).f1 == 2.0 / 3.0, || "ROUGE-1".into())?;
    check(rouge_n(&g, &r, 2).f1 == 0.5, || "ROUGE-2".into())?;
    check(rouge_l(&g, &r).f1 == 2.0 / 3.0, || "ROUGE-L".into())?;
    let same = rouge_words("Airbus stoppt die A380");
    check(
        rouge_n(&same, &same, 1).f1 == 1.0 && rouge_n(&same, &same, 2).f1 == 1.0 && rouge_l(&same, &same).f1 == 1.0,
        || "identity".into(),
    )
}

fn sentence_sim_fixtures() -> Outcome {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut store = EmbeddingStore::new(2);
    for (w, v) in [("g1", [1.0, 0.0]), ("g2", [h, h]), ("r1", [1.0, 0.0]), ("r2", [0.0, 1.0])] {
        store.insert(w, v.to_vec()).map_err(|e| e.to_string())?;
    }
    let s = sentence_sim(&["g1", "g2"], &["r1", "r2"], &store);
    close(s.score, 0.853553, 1e-6, "designed example")?;
    close(s.score, (1.0 + h) / 2.0, 1e-15, "direct cosine arithmetic")?;
    let id = sentence_sim(&["g1", "g2", "r2"], &["g1", "g2", "r2"], &store);
    close(id.score, 1.0, 1e-12, "identity")?;
    // every generated word has a close partner, but r2 has none among {g1}
    let fwd = sentence_sim(&["g1"], &["r1", "r2"], &store).score;
    let back = sentence_sim(&["r1", "r2"], &["g1"], &store).score;
    check(fwd != back, || format!("symmetric: {fwd} == {back}"))
}

fn correlation_fixtures() -> Outcome {
    let xs: Vec<f64> = (0..20).map(f64::from).collect();
    let monotone: Vec<f64> = xs.iter().map(|x| x.powi(3) + x.exp()).collect();
    let rho = correlation(&xs, &monotone, CorrelationMethod::Spearman).map_err(|e| e.to_string())?;
    check(rho == 1.0, || format!("Spearman {rho}"))?;
    let antitone: Vec<f64> = xs.iter().map(|x| 7.0 - 2.5 * x).collect();
    let r = correlation(&xs, &antitone, CorrelationMethod::Pearson).map_err(|e| e.to_string())?;
    close(r, -1.0, 1e-12, "Pearson")
}

fn permutation_fixture() -> Outcome {
    let (a, b) = ([10.0, 11.0, 12.0], [0.0, 1.0, 2.0]);
    // exact p: only the observed split out of C(6,3) = 20 is as extreme
    let mut extreme = 0;
    for mask in 0u32..64 {
        if mask.count_ones() == 3 {
            let pooled = [a[0], a[1], a[2], b[0], b[1], b[2]];
            let sa: f64 = (0..6).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).sum();
            if sa / 3.0 - (30.0 - sa) / 3.0 >= 10.0 {
                extreme += 1;
            }
        }
    }
    check(extreme == 1, || format!("{extreme} extreme splits"))?;
    let run = |seed, exec| permutation_test(&a, &b, 9999, seed, exec).map_err(|e| e.to_string());
    let p = run(0, Execution::Parallel)?;
    check(p <= 0.05, || format!("p = {p} at the default seed"))?;
    check(p == run(0, Execution::Parallel)? && p == run(0, Execution::Sequential)?, || "not deterministic".into())?;
    for seed in 0..10 {
        let q = run(seed, Execution::Parallel)?;
        check(q > 0.0 && q <= 1.0, || format!("seed {seed}: p = {q}"))?;
    }
    Ok(())
}

fn corpus_filter_fixture() -> Outcome {
    let words = |n: usize| vec!["wort"; n].join(" ");
    let title = |n: usize| vec!["Titel"; n].join(" ");
    let mk = |id: &str, t: usize, b: usize, dept: Option<&str>| {
        let mut a = Article::new(id, &title(t), &words(b)).unwrap();
        a.department = dept.map(str::to_string);
        a
    };
    let mut spaced = mk("spaced-body-30", 5, 30, Some("wirtschaft"));
    spaced.text = format!("  {}  ", words(30).replace(' ', " \t\n "));
    let articles = vec![
        mk("body-29", 5, 29, Some("wirtschaft")),
        mk("body-30", 5, 30, Some("wirtschaft")),
        mk("body-512", 5, 512, Some("politik")),
        mk("body-513", 5, 513, Some("politik")),
        mk("title-2", 2, 100, Some("wirtschaft")),
        mk("title-3", 3, 100, Some("wirtschaft")),
        mk("title-12", 12, 100, Some("politik")),
        mk("title-13", 13, 100, Some("politik")),
        mk("dept-sport", 5, 100, Some("sport")),
        spaced,
    ];
    let bounds = FilterBounds {
        departments: Some(["wirtschaft", "politik"].into_iter().map(String::from).collect()),
        ..FilterBounds::default()
    };
    let kept = filter_articles(&articles, &bounds);
    let kept: Vec<&str> = kept.iter().map(|a| a.id.as_str()).collect();
    let want = ["body-30", "body-512", "title-3", "title-12", "spaced-body-30"];
    check(kept == want, || format!("kept {kept:?}"))?;
    let again = filter_articles(&filter_articles(&articles, &bounds), &bounds);
    check(again.len() == want.len(), || "not idempotent".into())
}

fn headliner(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_headliner"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "headliner {}: {}\n{}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// True if `tokens` repeats a bigram or trigram, or starts a word with the
/// same piece as the word before it.
fn violates_blocking(tokens: &[TokenId], vocab: &Vocab) -> bool {
    for n in [2, 3] {
        let mut seen = HashSet::new();
        if tokens.windows(n).any(|w| !seen.insert(w.to_vec())) {
            return true;
        }
    }
    let initials: Vec<TokenId> = tokens.iter().copied().filter(|&t| !vocab.is_continuation(t)).collect();
    initials.windows(2).any(|w| w[0] == w[1])
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let split = d.join("split");
    headliner(&[
        "ingest", "--input", s(&toy("corpus.jsonl")), "--output", s(&d.join("clean.jsonl")),
        "--split-dir", s(&split), "--split", "40,5,5,0", "--seed", "3",
    ])?;
    let train = split.join("train.jsonl");
    let vocab_path = d.join("vocab.txt");
    let model = d.join("model.ngram");
    let df = d.join("df.json");
    let rank = d.join("rank.json");
    headliner(&["build-vocab", "--corpus", s(&train), "--output", s(&vocab_path)])?;
    headliner(&[
        "train-lm", "--corpus", s(&train), "--vocab", s(&vocab_path), "--output", s(&model),
        "--order", "3", "--df-output", s(&df),
    ])?;
    let (ner, volumes) = (toy("ner.json"), toy("volumes.json"));
    let sources = [
        "--vocab", s(&vocab_path), "--ner", s(&ner), "--volumes", s(&volumes),
        "--df", s(&df),
    ];
    let mut rank_args = vec!["rank-keywords", "--corpus", s(&train), "--train-output", s(&rank)];
    rank_args.extend(sources);
    headliner(&rank_args)?;

    let test = split.join("test_auto.jsonl");
    let mut gen_args = vec![
        "generate", "--input", s(&test), "--model", s(&model), "--rank-model", s(&rank), "--n-best", "3",
    ];
    gen_args.extend(sources);
    let first = headliner(&gen_args)?;
    let second = headliner(&gen_args)?;
    check(first == second, || "two runs differ".into())?;
    let mut seq_args = vec!["--sequential"];
    seq_args.extend(&gen_args);
    check(headliner(&seq_args)? == first, || "sequential run differs".into())?;

    let vocab = Vocab::load(&vocab_path).map_err(|e| e.to_string())?;
    let lines: Vec<Value> = first.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    check(lines.len() == 5, || format!("{} articles", lines.len()))?;
    for line in &lines {
        let id = &line["article_id"];
        let cands = line["candidates"].as_array().unwrap();
        check(cands.len() == 3, || format!("{id}: {} candidates", cands.len()))?;
        for c in cands {
            let tokens: Vec<TokenId> = serde_json::from_value(c["token_ids"].clone()).unwrap();
            check(!tokens.is_empty() && tokens.len() <= 20, || format!("{id}: {} subtokens", tokens.len()))?;
            check(!violates_blocking(&tokens, &vocab), || format!("{id}: blocked n-gram in {}", c["title"]))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(60))
}

async fn send(app: axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(body: Value) -> Request<Body> {
    Request::post("/generate")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn contract(body: &Value) -> Outcome {
    let cands = body["candidates"].as_array().ok_or("no candidates")?;
    check(!cands.is_empty(), || "empty candidates".into())?;
    let scores: Vec<f64> = cands.iter().map(|c| c["score"].as_f64().unwrap()).collect();
    check(scores.windows(2).all(|w| w[0] >= w[1]), || format!("unsorted {scores:?}"))?;
    let mut ranks: Vec<u64> = body["keywords"].as_array().unwrap().iter().map(|k| k["rank"].as_u64().unwrap()).collect();
    ranks.sort_unstable();
    check(ranks == (0..ranks.len() as u64).collect::<Vec<_>>(), || format!("ranks {ranks:?}"))
}

fn service() -> Outcome {
    let corpus = load_corpus(toy("corpus.jsonl")).map_err(|e| e.to_string())?;
    let fixture = corpus.iter().find(|a| a.id == "toy-001").unwrap().clone();
    let train: Vec<Article> = corpus.into_iter().filter(|a| a.id != fixture.id).collect();
    let ner = ChainedNerClient {
        primary: Box::new(FixtureNerClient::load(toy("ner.json")).map_err(|e| e.to_string())?),
        fallback: Box::new(HeuristicNerClient),
    };
    let volumes = FixtureVolumeClient::load(toy("volumes.json")).map_err(|e| e.to_string())?;
    let fitted = fit(&train, &FitParams::default(), Box::new(ner), Box::new(volumes)).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log_path = dir.path().join("access.jsonl");
    let log = AccessLog::open(&log_path, false).map_err(|e| e.to_string())?;
    let defaults = DecodeConfig {
        beam_size: 4,
        n_best: 3,
        ..DecodeConfig::default()
    };
    let state = AppState::new(log, defaults, FilterBounds::default());
    state.install(fitted.generator, "toy".into(), "toy".into());
    let app = router(Arc::clone(&state), &[]);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async {
        let (status, body) = send(app.clone(), post(json!({"text": fixture.text}))).await;
        check(status == StatusCode::OK, || format!("status {status}: {body}"))?;
        contract(&body)?;

        let (status, body) = send(app.clone(), post(json!({"text": fixture.text, "pinned": ["A380"]}))).await;
        check(status == StatusCode::OK, || format!("pinned status {status}"))?;
        contract(&body)?;
        let top = body["keywords"].as_array().unwrap().iter().find(|k| k["rank"] == 0).cloned();
        check(top.as_ref().is_some_and(|k| k["surface"] == "A380"), || format!("rank 0 is {top:?}"))?;

        let tasks: Vec<_> = (0..20)
            .map(|i| {
                let app = app.clone();
                // a few malformed requests; they must be logged as well
                let body = if i % 7 == 6 { json!({"text": ""}) } else { json!({"text": fixture.text}) };
                tokio::spawn(async move { send(app, post(body)).await })
            })
            .collect();
        for t in tasks {
            let (status, _) = t.await.map_err(|e| e.to_string())?;
            check(status == StatusCode::OK || status == StatusCode::BAD_REQUEST, || format!("status {status}"))?;
        }
        Ok::<_, String>(())
    })?;
    let lines = std::fs::read_to_string(&log_path).map_err(|e| e.to_string())?.lines().count();
    check(lines == 22, || format!("{lines} log lines for 22 requests"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("penalty closed forms", penalty_closed_forms),
        ("length penalty symmetry", length_symmetry),
        ("oracle equivalence", oracle_equivalence),
        ("keyword monotonicity", keyword_monotonicity),
        ("ROUGE fixtures", rouge_fixtures),
        ("SentenceSim fixtures", sentence_sim_fixtures),
        ("correlation fixtures", correlation_fixtures),
        ("permutation test", permutation_fixture),
        ("corpus filters", corpus_filter_fixture),
        ("end-to-end toy pipeline", end_to_end),
        ("service", service),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        match run() {
            Ok(()) => println!("PASS  {name} ({:.2?})", start.elapsed()),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name} ({:.2?}): {e}", start.elapsed());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

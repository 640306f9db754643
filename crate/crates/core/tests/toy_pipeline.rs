use std::path::PathBuf;

use headliner_core::corpus::{filter_articles, load_corpus, split_corpus, FilterBounds, SplitSizes};
use headliner_core::decoder::DecodeConfig;
use headliner_core::keywords::{ChainedNerClient, FixtureNerClient, FixtureVolumeClient, HeuristicNerClient};
use headliner_core::pipeline::{fit, FitParams, GenerateOptions};

fn toy(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy").join(name)
}

#[test]
fn toy_corpus_generates_bounded_titles() {
    let articles = load_corpus(toy("corpus.jsonl")).unwrap();
    let kept = filter_articles(&articles, &FilterBounds::default());
    assert_eq!(kept.len(), 50);
    let split = split_corpus(&kept, SplitSizes::new(40, 5, 5, 0), 3).unwrap();
    let ner = ChainedNerClient {
        primary: Box::new(FixtureNerClient::load(toy("ner.json")).unwrap()),
        fallback: Box::new(HeuristicNerClient),
    };
    let volumes = FixtureVolumeClient::load(toy("volumes.json")).unwrap();
    let fitted = fit(&split.train, &FitParams::default(), Box::new(ner), Box::new(volumes)).unwrap();
    let report = fitted.rank_report.expect("toy titles contain entities");
    assert!(report.losses.last().unwrap() < &report.losses[0]);

    let opts = GenerateOptions::new(DecodeConfig {
        n_best: 3,
        ..DecodeConfig::default()
    });
    for a in &split.test_auto {
        let g = fitted.generator.generate(a, &opts).unwrap();
        assert_eq!(g.candidates.len(), 3, "{}", a.id);
        for w in g.candidates.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for c in &g.candidates {
            assert!(!c.tokens.is_empty() && c.tokens.len() <= 20);
            assert!(!c.title.is_empty());
        }
        let ranks: Vec<u32> = g.keywords.iter().map(|k| k.rank).collect();
        assert_eq!(ranks, (0..g.keywords.len() as u32).collect::<Vec<_>>());
    }
}

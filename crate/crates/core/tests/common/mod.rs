#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use discparse::config::Config;
use discparse::corpus::{ConversationTree, Utterance};
use discparse::encoding::EncoderConfig;
use discparse::labels::LabelId;
use discparse::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn utt(
    id: &str,
    parent: Option<&str>,
    author: &str,
    text: &str,
    labels: &[LabelId],
) -> Utterance {
    Utterance {
        node_id: id.to_string(),
        parent_id: parent.map(str::to_string),
        author_id: author.to_string(),
        text: text.to_string(),
        gold_labels: labels.iter().copied().collect(),
    }
}

/// Keyword -> label. An utterance carries exactly the labels of the
/// keywords it contains.
pub const RULE: [(&str, LabelId); 6] = [
    ("evidence", 25), // Sources
    ("why", 30),      // CriticalQuestion
    ("lol", 16),      // Ridicule
    ("nope", 29),     // DirectNo
    ("maybe", 24),    // Softening
    ("however", 8),   // CounterArgument
];

const FILLER: [&str; 12] = [
    "the", "policy", "people", "think", "city", "tax", "school", "really", "should", "data", "law",
    "vote",
];

/// `n_trees` chains of `depth` utterances whose labels follow [`RULE`].
pub fn synthetic_corpus(n_trees: usize, depth: usize, seed: u64) -> Vec<ConversationTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_trees)
        .map(|t| {
            let nodes = (0..depth)
                .map(|i| {
                    let mut words: Vec<&str> = (0..4)
                        .map(|_| FILLER[rng.random_range(0..FILLER.len())])
                        .collect();
                    let mut labels = BTreeSet::new();
                    let first = rng.random_range(0..RULE.len());
                    words.insert(rng.random_range(0..=words.len()), RULE[first].0);
                    labels.insert(RULE[first].1);
                    if rng.random_bool(0.3) {
                        let second = rng.random_range(0..RULE.len());
                        words.insert(rng.random_range(0..=words.len()), RULE[second].0);
                        labels.insert(RULE[second].1);
                    }
                    let labels: Vec<LabelId> = labels.into_iter().collect();
                    let parent = (i > 0).then(|| format!("n{}", i - 1));
                    utt(
                        &format!("n{i}"),
                        parent.as_deref(),
                        &format!("u{}", rng.random_range(0..3)),
                        &words.join(" "),
                        &labels,
                    )
                })
                .collect();
            ConversationTree::new(format!("t{t:02}"), nodes).unwrap()
        })
        .collect()
}

/// Random-text trees with arbitrary branching, for property checks.
pub fn random_tree(id: &str, n: usize, rng: &mut impl Rng) -> ConversationTree {
    let nodes = (0..n)
        .map(|i| {
            let parent = (i > 0).then(|| format!("n{}", rng.random_range(0..i)));
            let words: Vec<&str> = (0..rng.random_range(1..6))
                .map(|_| FILLER[rng.random_range(0..FILLER.len())])
                .collect();
            let labels: Vec<LabelId> = (0..rng.random_range(0..3))
                .map(|_| rng.random_range(0..31))
                .collect();
            utt(
                &format!("n{i}"),
                parent.as_deref(),
                &format!("a{}", rng.random_range(0..4)),
                &words.join(" "),
                &labels,
            )
        })
        .collect();
    ConversationTree::new(id, nodes).unwrap()
}

/// A model small enough to train in seconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config {
        model: ModelConfig {
            encoder: EncoderConfig {
                hidden_dim: 16,
                layers: 1,
                heads: 2,
                ffn_dim: 32,
                max_tokens: 64,
                ..EncoderConfig::default()
            },
            head_hidden: Some(16),
            ..ModelConfig::default()
        },
        ..Config::default()
    };
    cfg.train.k = 2;
    cfg.train.batch_size = 10;
    cfg.train.peak_lr = 3e-3;
    cfg.train.max_steps = Some(200);
    cfg.train.seed = 7;
    cfg
}

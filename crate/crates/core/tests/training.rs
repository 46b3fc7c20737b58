mod common;

use std::collections::BTreeSet;

use common::{synthetic_corpus, tiny_config};
use discparse::config::Config;
use discparse::corpus::ConversationTree;
use discparse::error::Error;
use discparse::evaluation::ConfusionCounts;
use discparse::nn::Parameterized;
use discparse::objectives::ALConfig;
use discparse::parsing::Parser;
use discparse::training::{Checkpoint, ContextLabels, Trainer};

fn training_micro_f(cfg: &Config, trees: &[ConversationTree]) -> f64 {
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut t = Trainer::new(cfg, &refs, &BTreeSet::new()).unwrap();
    t.run().unwrap();
    assert!(t.step_count() <= 200);
    let parser = Parser::new(t.model(), &cfg.parser).unwrap();
    let mut records = Vec::new();
    for tree in trees {
        records.extend(parser.records(tree, false).unwrap());
    }
    ConfusionCounts::from_records(&refs, &records)
        .unwrap()
        .micro_f()
}

#[test]
fn overfits_fifty_utterances() {
    let trees = synthetic_corpus(10, 5, 1);
    let mut cfg = tiny_config();
    cfg.train.al = ALConfig::bce();
    cfg.train.peak_lr = 1e-2;
    let f = training_micro_f(&cfg, &trees);
    assert!(f >= 0.95, "micro-F {f}");
}

#[test]
fn asymmetric_loss_training_decreases_loss() {
    let trees = synthetic_corpus(10, 5, 1);
    let cfg = tiny_config();
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut t = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    let first: f64 = (0..5).map(|_| t.step().unwrap().loss_dp).sum();
    t.run_until(195).unwrap();
    let last: f64 = (0..5).map(|_| t.step().unwrap().loss_dp).sum();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

fn weights(model: &impl Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, v| out.extend(v.iter().copied()));
    out
}

#[test]
fn resume_is_bit_identical() {
    let trees = synthetic_corpus(6, 4, 2);
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut cfg = tiny_config();
    cfg.train.max_steps = Some(12);
    cfg.train.batch_size = 7;
    cfg.train.context_labels = ContextLabels::Predicted;
    cfg.train.speaker_feature = true;

    let mut straight = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    straight.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    first.run_until(5).unwrap();
    first.checkpoint().save(dir.path()).unwrap();
    drop(first);
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let mut resumed = Trainer::resume(loaded, &refs, &BTreeSet::new()).unwrap();
    assert_eq!(resumed.step_count(), 5);
    resumed.run().unwrap();

    assert_eq!(resumed.step_count(), 12);
    let (a, b) = (weights(straight.model()), weights(resumed.model()));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(
        straight.checkpoint().optimizer,
        resumed.checkpoint().optimizer
    );
}

#[test]
fn alpha_one_ignores_auxiliary_loss() {
    let trees = synthetic_corpus(4, 4, 3);
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut cfg = tiny_config();
    cfg.train.alpha = 1.0;
    cfg.train.max_steps = Some(6);
    let mut with_nmp = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    cfg.train.nmp_enabled = false;
    let mut without = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    for _ in 0..6 {
        let a = with_nmp.step().unwrap();
        let b = without.step().unwrap();
        assert!(a.loss_nmp.is_some() && b.loss_nmp.is_none());
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(weights(with_nmp.model()), weights(without.model()));
}

#[test]
fn held_out_trees_are_refused() {
    let trees = synthetic_corpus(3, 3, 4);
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let held: BTreeSet<String> = [trees[1].tree_id().to_string()].into();
    assert!(matches!(
        Trainer::new(&tiny_config(), &refs, &held),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn divergence_reports_the_step() {
    let trees = synthetic_corpus(3, 3, 5);
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut cfg = tiny_config();
    cfg.train.peak_lr = 1e300;
    cfg.train.grad_clip = 0.0;
    cfg.train.warmup_frac = 0.01;
    let mut t = Trainer::new(&cfg, &refs, &BTreeSet::new()).unwrap();
    match t.run() {
        Err(Error::Divergence { step, loss }) => {
            assert!(step >= 1);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn training_log_has_one_line_per_step() {
    let trees = synthetic_corpus(3, 3, 6);
    let refs: Vec<&ConversationTree> = trees.iter().collect();
    let mut cfg = tiny_config();
    cfg.train.max_steps = Some(4);
    let mut buf = Vec::new();
    {
        let mut t = Trainer::new(&cfg, &refs, &BTreeSet::new())
            .unwrap()
            .with_log(&mut buf);
        t.run().unwrap();
    }
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 3);
    assert!(lines[0]["loss"].as_f64().unwrap().is_finite());
}

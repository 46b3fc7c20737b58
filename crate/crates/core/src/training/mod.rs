//! Fine-tuning loop: example construction, warmup/decay schedule, AdamW
//! steps with optional next-message auxiliary loss, and resumable
//! checkpoints.

mod checkpoint;

pub use checkpoint::{load_encoder, Checkpoint};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{enumerate_branches, BranchSequence, ConversationTree};
use crate::encoding::{TextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::labels::{LabelId, NUM_LABELS};
use crate::model::{ContextItem, DiscourseModel, ModelInput, Shape};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Parameterized};
use crate::objectives::{
    asymmetric_loss_with_grad, combined_loss, nmp_loss_with_grad, ALConfig, LossWeights,
};
use crate::parsing::Parser;

/// Source of the context label sets fed to the label-embedding pooling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLabels {
    /// Teacher forcing with the annotated labels.
    #[default]
    Gold,
    /// Labels predicted by the current model, refreshed every epoch.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Context length.
    pub k: usize,
    pub al: ALConfig,
    pub alpha: f64,
    pub seed: u64,
    pub context_labels: ContextLabels,
    pub speaker_feature: bool,
    pub nmp_enabled: bool,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps instead of `epochs` passes.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            peak_lr: 1e-5,
            warmup_frac: 0.3,
            k: 4,
            al: ALConfig::default(),
            alpha: 0.99,
            seed: 42,
            context_labels: ContextLabels::Gold,
            speaker_feature: false,
            nmp_enabled: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("train.warmup_frac must lie in (0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("train.alpha must lie in [0, 1]");
        }
        let non_negative = |x: f64| x >= 0.0;
        if ![self.peak_lr, self.weight_decay, self.grad_clip]
            .into_iter()
            .all(non_negative)
        {
            return bad(
                "train.peak_lr, train.weight_decay and train.grad_clip must be non-negative",
            );
        }
        if self.max_steps == Some(0) {
            return bad("train.max_steps must be positive when set");
        }
        self.al.validate()
    }

    pub fn shape(&self) -> Shape {
        Shape {
            k: self.k,
            speaker_feature: self.speaker_feature,
        }
    }
}

/// Piecewise-linear schedule: 0 to `peak_lr` over the first
/// `ceil(warmup_frac * total)` steps, then back down to 0 at `total`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    let warmup = (cfg.warmup_frac * total_steps as f64).ceil() as usize;
    if step <= warmup {
        if warmup == 0 {
            return cfg.peak_lr;
        }
        cfg.peak_lr * step as f64 / warmup as f64
    } else {
        cfg.peak_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextUtterance {
    pub node_id: String,
    pub text: String,
    pub author: String,
    pub gold: BTreeSet<LabelId>,
}

/// A labeled target utterance with up to `k` preceding utterances from
/// its own branch, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tree_id: String,
    pub node_id: String,
    pub text: String,
    pub author: String,
    pub gold: BTreeSet<LabelId>,
    pub context: Vec<ContextUtterance>,
    /// Text of the direct parent, the positive for next-message prediction.
    pub parent_text: Option<String>,
}

impl TrainingExample {
    pub fn gold_vector(&self) -> [bool; NUM_LABELS] {
        let mut v = [false; NUM_LABELS];
        for &l in &self.gold {
            v[l] = true;
        }
        v
    }
}

/// One example per labeled utterance. A node reached by several branches
/// has the same ancestor chain in each, so it is emitted once.
pub fn build_examples(branches: &[BranchSequence], k: usize) -> Vec<TrainingExample> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in branches {
        for (i, u) in b.utterances.iter().enumerate() {
            if !u.is_labeled() || !seen.insert((b.tree_id.clone(), u.node_id.clone())) {
                continue;
            }
            let start = i.saturating_sub(k);
            let context = b.utterances[start..i]
                .iter()
                .map(|c| ContextUtterance {
                    node_id: c.node_id.clone(),
                    text: c.text.clone(),
                    author: c.author_id.clone(),
                    gold: c.gold_labels.clone(),
                })
                .collect();
            out.push(TrainingExample {
                tree_id: b.tree_id.clone(),
                node_id: u.node_id.clone(),
                text: u.text.clone(),
                author: u.author_id.clone(),
                gold: u.gold_labels.clone(),
                context,
                parent_text: i.checked_sub(1).map(|p| b.utterances[p].text.clone()),
            });
        }
    }
    out
}

/// Fails if any example comes from a held-out tree.
pub fn check_no_leakage(examples: &[TrainingExample], held_out: &BTreeSet<String>) -> Result<()> {
    match examples.iter().find(|e| held_out.contains(&e.tree_id)) {
        Some(e) => Err(Error::InvalidArgument(format!(
            "training example {}/{} comes from a held-out tree",
            e.tree_id, e.node_id
        ))),
        None => Ok(()),
    }
}

pub type PredictedLabels = HashMap<(String, String), BTreeSet<LabelId>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_dp: f64,
    pub loss_nmp: Option<f64>,
    pub loss: f64,
}

fn model_input<'e>(
    ex: &'e TrainingExample,
    mode: ContextLabels,
    predicted: Option<&'e PredictedLabels>,
    empty: &'e BTreeSet<LabelId>,
) -> ModelInput<'e> {
    let context = ex
        .context
        .iter()
        .map(|c| {
            let labels = match (mode, predicted) {
                (ContextLabels::Predicted, Some(p)) => p
                    .get(&(ex.tree_id.clone(), c.node_id.clone()))
                    .unwrap_or(empty),
                _ => &c.gold,
            };
            ContextItem {
                text: &c.text,
                author: &c.author,
                labels,
            }
        })
        .collect();
    ModelInput {
        text: &ex.text,
        author: &ex.author,
        context,
    }
}

pub struct Trainer<'a> {
    cfg: Config,
    trees: Vec<&'a ConversationTree>,
    examples: Vec<TrainingExample>,
    model: DiscourseModel,
    optimizer: AdamW,
    step: usize,
    total_steps: usize,
    predicted: Option<PredictedLabels>,
    log: Option<Box<dyn Write + Send + 'a>>,
}

fn training_examples(
    trees: &[&ConversationTree],
    k: usize,
    held_out: &BTreeSet<String>,
) -> Result<Vec<TrainingExample>> {
    let branches: Vec<BranchSequence> = trees.iter().flat_map(|t| enumerate_branches(t)).collect();
    let examples = build_examples(&branches, k);
    check_no_leakage(&examples, held_out)?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "training trees contain no labeled utterances".into(),
        ));
    }
    Ok(examples)
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

impl<'a> Trainer<'a> {
    /// Fresh model. `held_out` lists tree ids that must not contribute
    /// training examples.
    pub fn new(
        cfg: &Config,
        trees: &[&'a ConversationTree],
        held_out: &BTreeSet<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        let examples = training_examples(trees, cfg.train.k, held_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let encoder = match cfg.model.encoder.resolve_checkpoint()? {
            Some(dir) => load_encoder(&dir, &cfg.model.encoder)?,
            None => {
                let vocab = Vocab::build(
                    trees
                        .iter()
                        .flat_map(|t| t.nodes().iter().map(|n| n.text.as_str())),
                    cfg.model.encoder.vocab_size,
                );
                TextEncoder::new(cfg.model.encoder.clone(), vocab, &mut rng)?
            }
        };
        let mut resolved = cfg.clone();
        resolved.model.encoder = encoder.config().clone();
        let model = DiscourseModel::with_encoder(
            encoder,
            &resolved.model,
            resolved.train.shape(),
            &mut rng,
        );
        let optimizer = AdamW::new(adamw_config(&resolved.train), &model);
        let steps_per_epoch = examples.len().div_ceil(resolved.train.batch_size);
        let total_steps = resolved
            .train
            .max_steps
            .unwrap_or(resolved.train.epochs * steps_per_epoch);
        Ok(Trainer {
            cfg: resolved,
            trees: trees.to_vec(),
            examples,
            model,
            optimizer,
            step: 0,
            total_steps,
            predicted: None,
            log: None,
        })
    }

    /// Continues a run from a checkpoint over the same training trees.
    pub fn resume(
        ckpt: Checkpoint,
        trees: &[&'a ConversationTree],
        held_out: &BTreeSet<String>,
    ) -> Result<Self> {
        let examples = training_examples(trees, ckpt.config.train.k, held_out)?;
        Ok(Trainer {
            cfg: ckpt.config,
            trees: trees.to_vec(),
            examples,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            total_steps: ckpt.total_steps,
            predicted: ckpt.predicted_context,
            log: None,
        })
    }

    pub fn with_log(mut self, sink: impl Write + Send + 'a) -> Self {
        self.log = Some(Box::new(sink));
        self
    }

    pub fn model(&self) -> &DiscourseModel {
        &self.model
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.cfg.train.batch_size)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn refresh_predictions(&mut self) -> Result<()> {
        let parser = Parser::new(&self.model, &self.cfg.parser)?;
        let mut map = PredictedLabels::new();
        for t in &self.trees {
            for (node, pred) in parser.tag_tree(t)? {
                map.insert((t.tree_id().to_string(), node), pred.labels);
            }
        }
        self.predicted = Some(map);
        Ok(())
    }

    /// One optimizer step over the next mini-batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let within = self.step % spe;
        let mode = self.cfg.train.context_labels;
        if mode == ContextLabels::Predicted && (within == 0 || self.predicted.is_none()) {
            self.refresh_predictions()?;
        }
        let order = self.epoch_order(epoch);
        let bs = self.cfg.train.batch_size;
        let batch: Vec<usize> = order[within * bs..((within + 1) * bs).min(order.len())].to_vec();

        let tc = self.cfg.train.clone();
        let alpha = tc.alpha;
        let aux_weight = 1.0 - alpha;
        let n = batch.len() as f64;
        let empty = BTreeSet::new();

        // Auxiliary loss first: embeddings are recomputed with caches below,
        // so only one example's activations are alive at a time.
        let pairs: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&i| self.examples[i].parent_text.is_some())
            .collect();
        let mut loss_nmp = None;
        let mut d_anchor: HashMap<usize, Array1<f64>> = HashMap::new();
        let mut d_partner: HashMap<usize, Array1<f64>> = HashMap::new();
        if tc.nmp_enabled && pairs.len() >= 2 {
            let anchors: Vec<Array1<f64>> = pairs
                .iter()
                .map(|&i| {
                    self.model
                        .encoder
                        .embed_utterance(&self.examples[i].text)
                        .vector
                })
                .collect();
            let partners: Vec<Array1<f64>> = pairs
                .iter()
                .map(|&i| {
                    let p = self.examples[i].parent_text.as_deref().expect("filtered");
                    self.model.encoder.embed_utterance(p).vector
                })
                .collect();
            let (l, da, dp) = nmp_loss_with_grad(&anchors, &partners)?;
            loss_nmp = Some(l);
            if aux_weight != 0.0 {
                for ((&i, a), p) in pairs.iter().zip(da).zip(dp) {
                    d_anchor.insert(i, a * aux_weight);
                    d_partner.insert(i, p * aux_weight);
                }
            }
        }

        self.model.zero_grad();
        let mut dp_total = 0.0;
        for &i in &batch {
            let ex = &self.examples[i];
            let input = model_input(ex, mode, self.predicted.as_ref(), &empty);
            let (scores, cache) = self.model.forward(&input)?;
            let (loss, dscores) = asymmetric_loss_with_grad(&scores.0, &ex.gold_vector(), &tc.al);
            dp_total += loss;
            let dlogits = Array1::from_iter(
                dscores
                    .iter()
                    .zip(scores.0.iter())
                    .map(|(&g, &s)| g * s * (1.0 - s) * alpha / n),
            );
            let extra = d_anchor.get(&i).map(|a| a.view());
            let parent = ex.parent_text.clone();
            self.model.backward(&cache, dlogits.view(), extra);
            if let (Some(dpart), Some(text)) = (d_partner.get(&i), parent) {
                let (_, pcache) = self.model.encoder.forward_utterance(&text);
                self.model.encoder.backward(&pcache, dpart.view());
            }
        }
        let loss_dp = dp_total / n;
        let loss = combined_loss(loss_dp, loss_nmp.unwrap_or(0.0), LossWeights { alpha });
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }

        clip_grad_norm(&mut self.model, tc.grad_clip);
        let lr = lr_schedule(self.step, self.total_steps, &tc);
        self.optimizer.step(&mut self.model, lr);
        let record = StepLog {
            step: self.step,
            lr,
            loss_dp,
            loss_nmp,
            loss,
        };
        self.step += 1;
        if let Some(w) = &mut self.log {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io("<train log>", e))?;
        }
        Ok(record)
    }

    /// Steps until `target` (capped at the run length).
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        while self.step < target.min(self.total_steps) {
            self.step()?;
        }
        if let Some(w) = &mut self.log {
            w.flush().map_err(|e| Error::io("<train log>", e))?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            total_steps: self.total_steps,
            predicted_context: self.predicted.clone(),
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            model: self.model,
            optimizer: self.optimizer,
            step: self.step,
            total_steps: self.total_steps,
            predicted_context: self.predicted,
        }
    }
}

/// Trains a fresh model to completion on `trees`.
pub fn train(
    cfg: &Config,
    trees: &[&ConversationTree],
    held_out: &BTreeSet<String>,
) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, trees, held_out)?;
    t.run()?;
    Ok(t.into_checkpoint())
}

/// Gradient of the logit-level training loss is exposed for tests.
pub fn logit_grad(scores: &[f64], gold: &[bool], al: &ALConfig) -> Array1<f64> {
    let (_, d) = asymmetric_loss_with_grad(scores, gold, al);
    Array1::from_iter(d.iter().zip(scores).map(|(&g, &s)| g * s * (1.0 - s)))
}

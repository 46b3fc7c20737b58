use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_config, PredictedLabels};
use crate::config::Config;
use crate::encoding::{EncoderConfig, TextEncoder, Vocab};
use crate::error::{Error, Result};
use crate::labels::LabelId;
use crate::model::DiscourseModel;
use crate::nn::{AdamW, Parameterized};
use crate::store::{assign_params, read_tensors, save_params, write_tensors};

const WEIGHTS: &str = "weights.bin";
const OPTIMIZER: &str = "optimizer.bin";
const CONFIG: &str = "config.json";
const VOCAB: &str = "vocab.json";
const STATE: &str = "state.json";
const CONTEXT_LABELS: &str = "context_labels.json";

/// Everything needed to tag new data or continue training exactly where a
/// run stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub model: DiscourseModel,
    pub optimizer: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub predicted_context: Option<PredictedLabels>,
}

#[derive(Serialize, Deserialize)]
struct State {
    step: usize,
    total_steps: usize,
    optimizer_step: u64,
}

#[derive(Serialize, Deserialize)]
struct PredictedRecord {
    tree_id: String,
    node_id: String,
    labels: BTreeSet<LabelId>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn skeleton(config: &Config, vocab: Vocab) -> Result<DiscourseModel> {
    // Weights are overwritten right after, the seed is irrelevant.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    DiscourseModel::new(&config.model, config.train.shape(), vocab, &mut rng)
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG), &self.config)?;
        self.model.encoder.vocab().save(&dir.join(VOCAB))?;
        save_params(&self.model, &dir.join(WEIGHTS))?;

        let mut names = Vec::new();
        self.model
            .visit("", &mut |name, _| names.push(name.to_string()));
        let moments = names
            .iter()
            .zip(&self.optimizer.first)
            .map(|(n, m)| (format!("m.{n}"), m.view()))
            .chain(
                names
                    .iter()
                    .zip(&self.optimizer.second)
                    .map(|(n, v)| (format!("v.{n}"), v.view())),
            );
        write_tensors(&dir.join(OPTIMIZER), moments)?;
        write_json(
            &dir.join(STATE),
            &State {
                step: self.step,
                total_steps: self.total_steps,
                optimizer_step: self.optimizer.step,
            },
        )?;
        let labels_path = dir.join(CONTEXT_LABELS);
        match &self.predicted_context {
            Some(map) => {
                let mut records: Vec<PredictedRecord> = map
                    .iter()
                    .map(|((t, n), l)| PredictedRecord {
                        tree_id: t.clone(),
                        node_id: n.clone(),
                        labels: l.clone(),
                    })
                    .collect();
                records.sort_by(|a, b| (&a.tree_id, &a.node_id).cmp(&(&b.tree_id, &b.node_id)));
                write_json(&labels_path, &records)?;
            }
            None if labels_path.exists() => {
                fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.join(CONFIG).is_file() {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint directory",
                dir.display()
            )));
        }
        let config: Config = read_json(&dir.join(CONFIG))?;
        config.validate()?;
        let vocab = Vocab::load(&dir.join(VOCAB))?;
        let mut model = skeleton(&config, vocab)?;
        assign_params(&mut model, &read_tensors(&dir.join(WEIGHTS))?, "")?;

        let mut optimizer = AdamW::new(adamw_config(&config.train), &model);
        let moments = read_tensors(&dir.join(OPTIMIZER))?;
        let mut names = Vec::new();
        model.visit("", &mut |name, _| names.push(name.to_string()));
        let fetch = |key: String, like: &ArrayD<f64>| -> Result<ArrayD<f64>> {
            match moments.get(&key) {
                Some(t) if t.shape() == like.shape() => Ok(t.clone()),
                _ => Err(Error::Checkpoint(format!("optimizer state lacks {key}"))),
            }
        };
        for (i, n) in names.iter().enumerate() {
            optimizer.first[i] = fetch(format!("m.{n}"), &optimizer.first[i])?;
            optimizer.second[i] = fetch(format!("v.{n}"), &optimizer.second[i])?;
        }
        let state: State = read_json(&dir.join(STATE))?;
        optimizer.step = state.optimizer_step;

        let labels_path = dir.join(CONTEXT_LABELS);
        let predicted_context = if labels_path.is_file() {
            let records: Vec<PredictedRecord> = read_json(&labels_path)?;
            Some(
                records
                    .into_iter()
                    .map(|r| ((r.tree_id, r.node_id), r.labels))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            step: state.step,
            total_steps: state.total_steps,
            predicted_context,
        })
    }
}

/// Loads only the encoder (weights and vocabulary) from a checkpoint
/// directory, e.g. one produced by an earlier run.
pub fn load_encoder(dir: &Path, requested: &EncoderConfig) -> Result<TextEncoder> {
    let config: Config = read_json(&dir.join(CONFIG))?;
    let mut enc_cfg = config.model.encoder.clone();
    if enc_cfg.hidden_dim != requested.hidden_dim {
        return Err(Error::Config(format!(
            "encoder.hidden_dim is {} but checkpoint {} has width {}",
            requested.hidden_dim,
            dir.display(),
            enc_cfg.hidden_dim
        )));
    }
    enc_cfg.checkpoint_id = requested.checkpoint_id.clone();
    let vocab = Vocab::load(&dir.join(VOCAB))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = TextEncoder::new(enc_cfg, vocab, &mut rng)?;
    let tensors: BTreeMap<String, ArrayD<f64>> = read_tensors(&dir.join(WEIGHTS))?;
    assign_params(&mut encoder, &tensors, "encoder.")?;
    Ok(encoder)
}

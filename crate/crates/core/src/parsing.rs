//! Autoregressive tagging of branches and whole trees: each utterance is
//! classified from its own text plus the texts and *predicted* labels of
//! its preceding context.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_branches, ConversationTree, Utterance};
use crate::error::{Error, Result};
use crate::labels::{self, LabelId, NUM_LABELS};
use crate::model::{ContextItem, DiscourseModel, ModelInput};
use crate::objectives::LabelScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserConfig {
    /// A label is assigned when its score is at least this value.
    pub threshold: f64,
    /// Context length at inference; defaults to the one the model was
    /// trained with and may not exceed it.
    pub inference_k: Option<usize>,
    /// Emit one prediction list per root-to-leaf branch instead of one
    /// prediction per node.
    pub per_branch: bool,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            threshold: 0.5,
            inference_k: None,
            per_branch: false,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("parser.threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: LabelScores,
    pub labels: BTreeSet<LabelId>,
}

/// Predictions for every node of one branch, in branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPrediction {
    pub leaf_id: String,
    pub node_ids: Vec<String>,
    pub predictions: Vec<Prediction>,
}

pub struct Parser<'m> {
    model: &'m DiscourseModel,
    threshold: f64,
    k: usize,
}

impl<'m> Parser<'m> {
    pub fn new(model: &'m DiscourseModel, cfg: &ParserConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.inference_k.unwrap_or(model.k());
        if k > model.k() {
            return Err(Error::Config(format!(
                "parser.inference_k = {k} exceeds the context length the model was built for ({})",
                model.k()
            )));
        }
        Ok(Parser {
            model,
            threshold: cfg.threshold,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn predict_one(
        &self,
        target: &Utterance,
        history: &[(&Utterance, &BTreeSet<LabelId>)],
    ) -> Result<Prediction> {
        let start = history.len().saturating_sub(self.k);
        let input = ModelInput {
            text: &target.text,
            author: &target.author_id,
            context: history[start..]
                .iter()
                .map(|(u, l)| ContextItem {
                    text: &u.text,
                    author: &u.author_id,
                    labels: l,
                })
                .collect(),
        };
        let scores = self.model.predict(&input)?;
        Ok(Prediction {
            labels: scores.labels(self.threshold),
            scores,
        })
    }

    /// Tags a branch left to right. Gold labels on the input are ignored.
    pub fn tag_branch(&self, branch: &[Utterance]) -> Result<Vec<Prediction>> {
        let mut out: Vec<Prediction> = Vec::with_capacity(branch.len());
        for (i, u) in branch.iter().enumerate() {
            let history: Vec<(&Utterance, &BTreeSet<LabelId>)> = branch[..i]
                .iter()
                .zip(out.iter().map(|p| &p.labels))
                .collect();
            let pred = self.predict_one(u, &history)?;
            out.push(pred);
        }
        Ok(out)
    }

    /// Tags every node once, in breadth-first order, using its ancestor
    /// chain as context. Shared prefixes of branches are computed once.
    pub fn tag_tree(&self, tree: &ConversationTree) -> Result<Vec<(String, Prediction)>> {
        let mut done: HashMap<&str, Prediction> = HashMap::new();
        let mut order = Vec::with_capacity(tree.len());
        for node in tree.bfs() {
            let ancestors = tree.ancestors(&node.node_id);
            let history = ancestors
                .iter()
                .map(|a| (*a, &done[a.node_id.as_str()].labels))
                .collect::<Vec<_>>();
            let pred = self.predict_one(node, &history)?;
            done.insert(&node.node_id, pred);
            order.push(node.node_id.as_str());
        }
        Ok(order
            .into_iter()
            .map(|id| (id.to_string(), done.remove(id).expect("tagged")))
            .collect())
    }

    pub fn tag_branches(&self, tree: &ConversationTree) -> Result<Vec<BranchPrediction>> {
        enumerate_branches(tree)
            .into_iter()
            .map(|b| {
                let predictions = self.tag_branch(&b.utterances)?;
                Ok(BranchPrediction {
                    leaf_id: b.leaf().node_id.clone(),
                    node_ids: b.utterances.iter().map(|u| u.node_id.clone()).collect(),
                    predictions,
                })
            })
            .collect()
    }

    /// Output records for a tree, honouring the per-branch switch.
    pub fn records(
        &self,
        tree: &ConversationTree,
        per_branch: bool,
    ) -> Result<Vec<PredictionRecord>> {
        let tid = tree.tree_id();
        if per_branch {
            let mut out = Vec::new();
            for b in self.tag_branches(tree)? {
                for (node, p) in b.node_ids.iter().zip(&b.predictions) {
                    out.push(PredictionRecord::new(tid, node, p, Some(&b.leaf_id)));
                }
            }
            Ok(out)
        } else {
            Ok(self
                .tag_tree(tree)?
                .iter()
                .map(|(node, p)| PredictionRecord::new(tid, node, p, None))
                .collect())
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tree_id: String,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<String>,
}

impl PredictionRecord {
    fn new(tree_id: &str, node_id: &str, p: &Prediction, branch: Option<&str>) -> Self {
        PredictionRecord {
            tree_id: tree_id.to_string(),
            node_id: node_id.to_string(),
            branch: branch.map(str::to_string),
            scores: p.scores.0.to_vec(),
            labels: p
                .labels
                .iter()
                .map(|&l| labels::label_name(l).to_string())
                .collect(),
        }
    }

    pub fn label_ids(&self) -> Result<BTreeSet<LabelId>> {
        let mut out = BTreeSet::new();
        let mut unknown = Vec::new();
        for name in &self.labels {
            match labels::label_id(name) {
                Some(id) => {
                    out.insert(id);
                }
                None => unknown.push(name.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(out)
        } else {
            Err(Error::UnknownLabel {
                node_id: self.node_id.clone(),
                names: unknown,
            })
        }
    }
}

pub fn write_predictions(records: &[PredictionRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<predictions>", e))?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<predictions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            location: format!("predictions line {}", i + 1),
            reason: e.to_string(),
        })?;
        if rec.scores.len() != NUM_LABELS {
            return Err(Error::Malformed {
                location: format!("predictions line {}", i + 1),
                reason: format!("expected {NUM_LABELS} scores, found {}", rec.scores.len()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

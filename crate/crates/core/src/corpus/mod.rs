//! Conversation-tree corpus: ingestion, validation, branch enumeration,
//! label priors and tree-grouped fold planning.
//!
//! The canonical on-disk format is JSON lines, one tree per line:
//!
//! ```json
//! {"tree_id":"t1","nodes":[{"node_id":"a","parent_id":null,"author_id":"op","text":"...","labels":["CounterArgument"]}]}
//! ```

mod convert;

pub use convert::convert_flat_table;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::labels::{self, LabelId, NUM_LABELS, TAGSET};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub node_id: String,
    pub parent_id: Option<String>,
    pub author_id: String,
    pub text: String,
    pub gold_labels: BTreeSet<LabelId>,
}

impl Utterance {
    pub fn is_labeled(&self) -> bool {
        !self.gold_labels.is_empty()
    }

    /// Gold labels as a 0/1 vector over the tagset.
    pub fn gold_vector(&self) -> [bool; NUM_LABELS] {
        let mut v = [false; NUM_LABELS];
        for &l in &self.gold_labels {
            v[l] = true;
        }
        v
    }
}

/// A validated discussion tree. Parent links form a single rooted tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationTree {
    tree_id: String,
    nodes: Vec<Utterance>,
    root: usize,
    index: HashMap<String, usize>,
    children: Vec<Vec<usize>>,
}

impl ConversationTree {
    pub fn new(tree_id: impl Into<String>, nodes: Vec<Utterance>) -> Result<Self> {
        let tree_id = tree_id.into();
        let invalid = |reason: String| Error::InvalidTree {
            tree_id: tree_id.clone(),
            reason,
        };
        if nodes.is_empty() {
            return Err(invalid("tree has no nodes".into()));
        }

        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.text.trim().is_empty() {
                return Err(Error::Malformed {
                    location: format!("tree {tree_id}, node {}", n.node_id),
                    reason: "empty text".into(),
                });
            }
            if let Some(&bad) = n.gold_labels.iter().find(|&&l| l >= NUM_LABELS) {
                return Err(Error::Malformed {
                    location: format!("tree {tree_id}, node {}", n.node_id),
                    reason: format!("label id {bad} out of range"),
                });
            }
            if index.insert(n.node_id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate node id {}", n.node_id)));
            }
        }

        let roots: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].parent_id.is_none())
            .collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(invalid("no root node (every node has a parent)".into())),
            many => {
                let ids: Vec<&str> = many.iter().map(|&i| nodes[i].node_id.as_str()).collect();
                return Err(invalid(format!("multiple roots: {ids:?}")));
            }
        };

        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = &n.parent_id {
                let &pi = index.get(p).ok_or_else(|| Error::Orphan {
                    tree_id: tree_id.clone(),
                    node_id: n.node_id.clone(),
                    parent_id: p.clone(),
                })?;
                children[pi].push(i);
            }
        }
        for c in &mut children {
            c.sort_by(|&a, &b| nodes[a].node_id.cmp(&nodes[b].node_id));
        }

        // every node must be reachable from the root, otherwise there is a cycle
        let mut seen = vec![false; nodes.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for &c in &children[i] {
                if !seen[c] {
                    seen[c] = true;
                    reached += 1;
                    queue.push_back(c);
                }
            }
        }
        if reached != nodes.len() {
            let stuck = (0..nodes.len()).find(|&i| !seen[i]).unwrap();
            return Err(invalid(format!(
                "node {} is not reachable from the root (cycle)",
                nodes[stuck].node_id
            )));
        }

        Ok(Self {
            tree_id,
            nodes,
            root,
            index,
            children,
        })
    }

    pub fn tree_id(&self) -> &str {
        &self.tree_id
    }

    pub fn nodes(&self) -> &[Utterance] {
        &self.nodes
    }

    pub fn root(&self) -> &Utterance {
        &self.nodes[self.root]
    }

    pub fn root_id(&self) -> &str {
        &self.nodes[self.root].node_id
    }

    pub fn get(&self, node_id: &str) -> Option<&Utterance> {
        self.index.get(node_id).map(|&i| &self.nodes[i])
    }

    pub fn children(&self, node_id: &str) -> impl Iterator<Item = &Utterance> {
        let ids = self
            .index
            .get(node_id)
            .map(|&i| self.children[i].as_slice())
            .unwrap_or(&[]);
        ids.iter().map(|&c| &self.nodes[c])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Utterance> {
        (0..self.nodes.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| &self.nodes[i])
    }

    /// Nodes in breadth-first order from the root; children by node id.
    pub fn bfs(&self) -> Vec<&Utterance> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(i) = queue.pop_front() {
            out.push(&self.nodes[i]);
            queue.extend(self.children[i].iter().copied());
        }
        out
    }

    /// The chain of ancestors of `node_id`, oldest first, excluding the node.
    pub fn ancestors(&self, node_id: &str) -> Vec<&Utterance> {
        let mut chain = Vec::new();
        let mut cur = self.get(node_id).and_then(|n| n.parent_id.as_deref());
        while let Some(p) = cur {
            let node = &self.nodes[self.index[p]];
            chain.push(node);
            cur = node.parent_id.as_deref();
        }
        chain.reverse();
        chain
    }

    pub fn label_assignments(&self) -> usize {
        self.nodes.iter().map(|n| n.gold_labels.len()).sum()
    }
}

/// Root-to-leaf path through one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSequence {
    pub tree_id: String,
    pub utterances: Vec<Utterance>,
}

impl BranchSequence {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn leaf(&self) -> &Utterance {
        self.utterances.last().expect("branch is never empty")
    }

    /// The first `len` utterances as a standalone branch.
    pub fn prefix(&self, len: usize) -> BranchSequence {
        BranchSequence {
            tree_id: self.tree_id.clone(),
            utterances: self.utterances[..len].to_vec(),
        }
    }
}

/// One branch per leaf, ordered by leaf node id.
pub fn enumerate_branches(tree: &ConversationTree) -> Vec<BranchSequence> {
    let mut leaves: Vec<&Utterance> = tree.leaves().collect();
    leaves.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    leaves
        .into_iter()
        .map(|leaf| {
            let mut utterances: Vec<Utterance> =
                tree.ancestors(&leaf.node_id).into_iter().cloned().collect();
            utterances.push(leaf.clone());
            BranchSequence {
                tree_id: tree.tree_id.clone(),
                utterances,
            }
        })
        .collect()
}

/// Summary counts over a collection of trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub trees: usize,
    pub branches: usize,
    pub utterances: usize,
    pub authors: usize,
    pub label_assignments: usize,
}

impl CorpusStats {
    pub fn of(trees: &[ConversationTree]) -> Self {
        let authors: HashSet<&str> = trees
            .iter()
            .flat_map(|t| t.nodes.iter().map(|n| n.author_id.as_str()))
            .collect();
        CorpusStats {
            trees: trees.len(),
            branches: trees.iter().map(|t| t.leaves().count()).sum(),
            utterances: trees.iter().map(|t| t.len()).sum(),
            authors: authors.len(),
            label_assignments: trees.iter().map(|t| t.label_assignments()).sum(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    node_id: String,
    #[serde(default)]
    parent_id: Option<String>,
    author_id: String,
    text: String,
    #[serde(default)]
    labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeRecord {
    tree_id: String,
    nodes: Vec<NodeRecord>,
}

fn node_from_record(rec: NodeRecord) -> Result<Utterance> {
    let mut gold = BTreeSet::new();
    let mut unknown = Vec::new();
    for name in &rec.labels {
        match labels::label_id(name) {
            Some(id) => {
                gold.insert(id);
            }
            None => unknown.push(name.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownLabel {
            node_id: rec.node_id,
            names: unknown,
        });
    }
    Ok(Utterance {
        node_id: rec.node_id,
        parent_id: rec.parent_id.filter(|p| !p.is_empty()),
        author_id: rec.author_id,
        text: rec.text,
        gold_labels: gold,
    })
}

fn parse_tree_line(line: &str, line_no: usize) -> Result<ConversationTree> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        location: format!("line {line_no}"),
        reason: e.to_string(),
    })?;
    let tree_id = value
        .get("tree_id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Malformed {
            location: format!("line {line_no}"),
            reason: "missing string field tree_id".into(),
        })?
        .to_string();
    let raw_nodes = value
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Malformed {
            location: format!("line {line_no}, tree {tree_id}"),
            reason: "missing array field nodes".into(),
        })?;

    let mut nodes = Vec::with_capacity(raw_nodes.len());
    for (i, raw) in raw_nodes.iter().enumerate() {
        let rec: NodeRecord = serde_json::from_value(raw.clone()).map_err(|e| {
            let who = raw
                .get("node_id")
                .and_then(Value::as_str)
                .map(|s| format!("node {s}"))
                .unwrap_or_else(|| format!("node #{i} (no node_id)"));
            Error::Malformed {
                location: format!("line {line_no}, tree {tree_id}, {who}"),
                reason: e.to_string(),
            }
        })?;
        nodes.push(node_from_record(rec)?);
    }
    ConversationTree::new(tree_id, nodes)
}

/// Reads and validates a canonical JSON-lines corpus.
pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<ConversationTree>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trees = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tree = parse_tree_line(&line, i + 1)?;
        if !seen.insert(tree.tree_id.clone()) {
            return Err(Error::Malformed {
                location: format!("line {}", i + 1),
                reason: format!("duplicate tree id {}", tree.tree_id),
            });
        }
        trees.push(tree);
    }
    if trees.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(trees)
}

fn tree_record(tree: &ConversationTree) -> TreeRecord {
    TreeRecord {
        tree_id: tree.tree_id.clone(),
        nodes: tree
            .nodes
            .iter()
            .map(|n| NodeRecord {
                node_id: n.node_id.clone(),
                parent_id: n.parent_id.clone(),
                author_id: n.author_id.clone(),
                text: n.text.clone(),
                labels: n
                    .gold_labels
                    .iter()
                    .map(|&l| labels::label_name(l).to_string())
                    .collect(),
            })
            .collect(),
    }
}

pub fn write_jsonl(trees: &[ConversationTree], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for t in trees {
        serde_json::to_writer(&mut w, &tree_record(t))?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

pub fn save(trees: &[ConversationTree], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(trees, file)
}

/// Per-label prior probability over all utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    pub w: [f64; NUM_LABELS],
    pub counts: [usize; NUM_LABELS],
    pub total_utterances: usize,
}

pub fn compute_priors(trees: &[ConversationTree]) -> Result<PriorTable> {
    let mut counts = [0usize; NUM_LABELS];
    let mut total = 0;
    for n in trees.iter().flat_map(|t| t.nodes.iter()) {
        total += 1;
        for &l in &n.gold_labels {
            counts[l] += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut w = [0.0; NUM_LABELS];
    for (wi, &c) in w.iter_mut().zip(&counts) {
        *wi = c as f64 / total as f64;
    }
    Ok(PriorTable {
        w,
        counts,
        total_utterances: total,
    })
}

impl PriorTable {
    /// Uniform weights; useful for macro/weighted comparisons.
    pub fn uniform() -> Self {
        PriorTable {
            w: [1.0 / NUM_LABELS as f64; NUM_LABELS],
            counts: [0; NUM_LABELS],
            total_utterances: 0,
        }
    }

    /// Writes `label,name,category,prior` rows.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "name", "category", "prior"])?;
        for def in TAGSET.iter() {
            w.write_record([
                def.id.to_string(),
                def.name.to_string(),
                def.category.to_string(),
                format!("{:.6}", self.w[def.id]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Assignment of whole trees to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FoldPlan {
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn n_folds(&self) -> usize {
        self.assignments.values().max().map_or(0, |m| m + 1)
    }

    pub fn fold_of(&self, tree_id: &str) -> Option<usize> {
        self.assignments.get(tree_id).copied()
    }

    pub fn trees_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(t, _)| t.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds()];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Splits trees into (train, test) for the given held-out fold.
    pub fn split<'a>(
        &self,
        trees: &'a [ConversationTree],
        test_fold: usize,
    ) -> (Vec<&'a ConversationTree>, Vec<&'a ConversationTree>) {
        trees
            .iter()
            .partition(|t| self.fold_of(t.tree_id()) != Some(test_fold))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

/// Shuffles tree ids with a seeded RNG and deals them round-robin, so fold
/// sizes differ by at most one and lower-numbered folds take the remainder.
pub fn plan_folds(trees: &[ConversationTree], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 || n_folds > trees.len() {
        return Err(Error::Folds {
            n_folds,
            n_trees: trees.len(),
        });
    }
    let mut ids: Vec<&str> = trees.iter().map(|t| t.tree_id()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % n_folds))
        .collect();
    Ok(FoldPlan { assignments })
}

//! Converter from a flat, one-row-per-utterance table (CSV or TSV) to
//! validated trees. Label columns are recognised by header name and hold
//! 0/1 (or true/false) flags.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels;

use super::{ConversationTree, Utterance};

const TREE_COLS: &[&str] = &["tree_id", "thread_id", "submission_id", "tree"];
const NODE_COLS: &[&str] = &["node_id", "comment_id", "id", "node"];
const PARENT_COLS: &[&str] = &["parent_id", "parent", "reply_to"];
const AUTHOR_COLS: &[&str] = &["author_id", "author", "user", "user_id"];
const TEXT_COLS: &[&str] = &["text", "body", "content", "utterance"];

fn find_col(headers: &[String], names: &[&str]) -> Option<usize> {
    names
        .iter()
        .find_map(|n| headers.iter().position(|h| h.eq_ignore_ascii_case(n)))
}

fn flag(value: &str) -> bool {
    matches!(
        value.trim().to_ascii_lowercase().as_str(),
        "1" | "1.0" | "true" | "yes" | "y"
    )
}

fn is_null(value: &str) -> bool {
    matches!(
        value.trim().to_ascii_lowercase().as_str(),
        "" | "nan" | "none" | "null" | "-1"
    )
}

/// Strips Reddit fullname prefixes (`t1_`, `t3_`).
fn bare_id(id: &str) -> &str {
    id.strip_prefix("t1_")
        .or_else(|| id.strip_prefix("t3_"))
        .unwrap_or(id)
}

pub fn convert_flat_table(path: impl AsRef<Path>) -> Result<Vec<ConversationTree>> {
    let path = path.as_ref();
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Malformed {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let need = |names: &[&str], what: &str| {
        find_col(&headers, names).ok_or_else(|| Error::Malformed {
            location: path.display().to_string(),
            reason: format!("no {what} column (looked for {names:?})"),
        })
    };
    let tree_col = need(TREE_COLS, "tree id")?;
    let node_col = need(NODE_COLS, "node id")?;
    let parent_col = need(PARENT_COLS, "parent id")?;
    let author_col = need(AUTHOR_COLS, "author")?;
    let text_col = need(TEXT_COLS, "text")?;
    let structural: HashSet<usize> = [tree_col, node_col, parent_col, author_col, text_col].into();

    let label_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !structural.contains(i))
        .filter_map(|(i, h)| labels::label_id(h).map(|l| (i, l)))
        .collect();
    if label_cols.is_empty() {
        return Err(Error::Malformed {
            location: path.display().to_string(),
            reason: "no column header matches a known label name".into(),
        });
    }

    let mut by_tree: BTreeMap<String, Vec<(Utterance, Option<String>)>> = BTreeMap::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let node_id = bare_id(get(node_col)).to_string();
        if node_id.is_empty() {
            return Err(Error::Malformed {
                location: format!("{} row {}", path.display(), row_no + 2),
                reason: "empty node id".into(),
            });
        }
        let gold: BTreeSet<usize> = label_cols
            .iter()
            .filter(|(col, _)| flag(get(*col)))
            .map(|&(_, l)| l)
            .collect();
        let raw_parent = get(parent_col);
        let parent = (!is_null(raw_parent)).then(|| bare_id(raw_parent).to_string());
        by_tree.entry(get(tree_col).to_string()).or_default().push((
            Utterance {
                node_id,
                parent_id: None,
                author_id: get(author_col).to_string(),
                text: record.get(text_col).unwrap_or("").to_string(),
                gold_labels: gold,
            },
            parent,
        ));
    }

    let mut trees = Vec::with_capacity(by_tree.len());
    for (tree_id, rows) in by_tree {
        let ids: HashSet<String> = rows.iter().map(|(u, _)| u.node_id.clone()).collect();
        let tree_bare = bare_id(&tree_id).to_string();
        let nodes = rows
            .into_iter()
            .map(|(mut u, parent)| {
                // a parent pointing at the submission itself marks the root when the
                // submission has no row of its own
                u.parent_id =
                    parent.filter(|p| ids.contains(p) || (*p != tree_bare && *p != u.node_id));
                u
            })
            .collect();
        trees.push(ConversationTree::new(tree_id, nodes)?);
    }
    if trees.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_flag_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.csv");
        std::fs::write(
            &p,
            "thread_id,id,parent_id,author,body,CounterArgument,Direct No,Sarcasm\n\
             s1,t3_r,,op,Root text,0,0,0\n\
             s1,t1_a,t3_r,u1,\"Reply, with comma\",1,0,1\n\
             s1,t1_b,t1_a,op,No.,0,1,0\n\
             s2,x,nan,op,Other root,1,0,0\n",
        )
        .unwrap();
        let trees = convert_flat_table(&p).unwrap();
        assert_eq!(trees.len(), 2);
        let t = &trees[0];
        assert_eq!(t.root_id(), "r");
        assert_eq!(t.get("a").unwrap().gold_labels, [8, 17].into());
        assert_eq!(t.get("b").unwrap().gold_labels, [29].into());
        assert_eq!(t.get("a").unwrap().text, "Reply, with comma");
        assert_eq!(trees[1].root().gold_labels, [8].into());
    }

    #[test]
    fn missing_columns_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.csv");
        std::fs::write(&p, "id,parent_id,author,body\n").unwrap();
        assert!(convert_flat_table(&p)
            .unwrap_err()
            .to_string()
            .contains("tree id"));
    }
}

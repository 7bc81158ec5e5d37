//! Scoring predictions against ground truth: implicit micro F1, normalised
//! tree edit distance, validity, document accuracy and the per-filter report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Level, SchemaDef};
use crate::values::{ImplicitDocument, ImplicitValue, Leaf};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nTED is undefined for an empty ground-truth tree")]
    EmptyTruth,
}

// ---------------------------------------------------------------------------
// Field bags and micro F1

/// Multiset of (key path without list indices, canonical value) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldBag {
    counts: BTreeMap<(String, String), usize>,
}

impl FieldBag {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        *self.counts.entry((key.into(), value.into())).or_default() += 1;
    }

    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Size of the multiset intersection.
    pub fn overlap(&self, other: &FieldBag) -> usize {
        self.counts
            .iter()
            .map(|(k, n)| (*n).min(other.counts.get(k).copied().unwrap_or(0)))
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.counts.iter().map(|((k, v), n)| (k.as_str(), v.as_str(), *n))
    }
}

/// Flattens every present leaf of a resolved document into a [`FieldBag`].
pub fn flatten(doc: &ImplicitDocument, schema: &SchemaDef) -> FieldBag {
    let mut bag = FieldBag::default();
    for level in Level::ALL {
        for (_, record) in doc.records_at(level) {
            for f in schema.fields_at(level) {
                let key = f.path();
                match record.fields.get(&f.name) {
                    Some(ImplicitValue::Scalar(Some(leaf))) => bag.insert(key, leaf.value.canonical()),
                    Some(ImplicitValue::List(items)) => {
                        for leaf in items.iter().flatten() {
                            bag.insert(key.clone(), leaf.value.canonical());
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    bag
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub expected: usize,
}

impl F1Score {
    pub fn from_counts(true_positives: usize, predicted: usize, expected: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, expected);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            expected,
        }
    }
}

/// Micro-averaged F1 over (prediction, truth) bag pairs.
pub fn micro_f1<'a, I>(pairs: I) -> F1Score
where
    I: IntoIterator<Item = (&'a FieldBag, &'a FieldBag)>,
{
    let (mut tp, mut predicted, mut expected) = (0, 0, 0);
    for (pred, truth) in pairs {
        tp += pred.overlap(truth);
        predicted += pred.len();
        expected += truth.len();
    }
    F1Score::from_counts(tp, predicted, expected)
}

// ---------------------------------------------------------------------------
// Trees

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        TreeNode {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn new(label: impl Into<String>, children: Vec<TreeNode>) -> Self {
        TreeNode {
            label: label.into(),
            children,
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TreeNode::size).sum::<usize>()
    }
}

/// Ordered labelled tree of a document: object keys are internal nodes, list
/// elements ordered children and values leaves. A document without any
/// present value is the empty tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocTree {
    pub root: Option<TreeNode>,
}

pub const ROOT_LABEL: &str = "<root>";
pub const ITEM_LABEL: &str = "<item>";

impl DocTree {
    pub fn empty() -> Self {
        DocTree { root: None }
    }

    pub fn from_node(node: TreeNode) -> Self {
        DocTree { root: Some(node) }
    }

    pub fn size(&self) -> usize {
        self.root.as_ref().map_or(0, TreeNode::size)
    }

    pub fn from_document(doc: &ImplicitDocument, schema: &SchemaDef) -> Self {
        let children = record_nodes(doc, schema, Level::Global);
        if children.is_empty() {
            DocTree::empty()
        } else {
            DocTree::from_node(TreeNode::new(ROOT_LABEL, children))
        }
    }
}

fn record_nodes(record: &ImplicitDocument, schema: &SchemaDef, level: Level) -> Vec<TreeNode> {
    let mut nodes = Vec::new();
    for f in schema.fields_at(level) {
        let values: Vec<&Leaf> = match record.fields.get(&f.name) {
            Some(ImplicitValue::Scalar(Some(leaf))) => vec![leaf],
            Some(ImplicitValue::List(items)) => items.iter().flatten().collect(),
            _ => continue,
        };
        if !values.is_empty() {
            let leaves = values.iter().map(|l| TreeNode::leaf(l.value.canonical())).collect();
            nodes.push(TreeNode::new(f.name.clone(), leaves));
        }
    }
    if let (Some(key), Some(child)) = (level.child_key(), level.child()) {
        if !record.children.is_empty() {
            let items = record
                .children
                .iter()
                .map(|c| TreeNode::new(ITEM_LABEL, record_nodes(c, schema, child)))
                .collect();
            nodes.push(TreeNode::new(key, items));
        }
    }
    nodes
}

/// Post-order view used by the Zhang–Shasha recursion.
struct PostOrder<'a> {
    labels: Vec<&'a str>,
    /// Post-order index of the leftmost leaf below each node.
    leftmost: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a> PostOrder<'a> {
    fn new(tree: &'a DocTree) -> Self {
        let mut labels = Vec::new();
        let mut leftmost = Vec::new();
        if let Some(root) = &tree.root {
            Self::visit(root, &mut labels, &mut leftmost);
        }
        // A keyroot is the highest node for each distinct leftmost leaf.
        let n = labels.len();
        let mut last_for_leaf = vec![None; n];
        for (i, &l) in leftmost.iter().enumerate() {
            last_for_leaf[l] = Some(i);
        }
        let mut keyroots: Vec<usize> = last_for_leaf.into_iter().flatten().collect();
        keyroots.sort_unstable();
        PostOrder {
            labels,
            leftmost,
            keyroots,
        }
    }

    fn visit(node: &'a TreeNode, labels: &mut Vec<&'a str>, leftmost: &mut Vec<usize>) -> usize {
        let mut first_leaf = None;
        for child in &node.children {
            let l = Self::visit(child, labels, leftmost);
            first_leaf.get_or_insert(l);
        }
        let me = labels.len();
        let l = first_leaf.unwrap_or(me);
        labels.push(&node.label);
        leftmost.push(l);
        l
    }
}

/// Zhang–Shasha ordered tree edit distance with unit insert, delete and
/// relabel costs.
pub fn ted(a: &DocTree, b: &DocTree) -> usize {
    let ta = PostOrder::new(a);
    let tb = PostOrder::new(b);
    let (n, m) = (ta.labels.len(), tb.labels.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let mut tree_dist = vec![vec![0usize; m]; n];
    // forest buffer reused across keyroot pairs, indexed from l-1
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &ta.keyroots {
        for &j in &tb.keyroots {
            let (li, lj) = (ta.leftmost[i], tb.leftmost[j]);
            let rows = i - li + 2;
            let cols = j - lj + 2;
            fd[0][0] = 0;
            for x in 1..rows {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..cols {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..rows {
                let ni = li + x - 1;
                for y in 1..cols {
                    let nj = lj + y - 1;
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if ta.leftmost[ni] == li && tb.leftmost[nj] == lj {
                        let relabel = usize::from(ta.labels[ni] != tb.labels[nj]);
                        let best = del.min(ins).min(fd[x - 1][y - 1] + relabel);
                        fd[x][y] = best;
                        tree_dist[ni][nj] = best;
                    } else {
                        let px = ta.leftmost[ni] - li;
                        let py = tb.leftmost[nj] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + tree_dist[ni][nj]);
                    }
                }
            }
        }
    }
    tree_dist[n - 1][m - 1]
}

/// `ted(pred, truth) / ted(empty, truth)`; 0 is a perfect match.
pub fn nted(pred: &DocTree, truth: &DocTree) -> Result<f64, MetricsError> {
    let denominator = truth.size();
    if denominator == 0 {
        return Err(MetricsError::EmptyTruth);
    }
    Ok(ted(pred, truth) as f64 / denominator as f64)
}

/// Percentage of pairs whose trees are identical.
pub fn doc_accuracy<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a DocTree, &'a DocTree)>,
{
    let (mut exact, mut total) = (0usize, 0usize);
    for (pred, truth) in pairs {
        total += 1;
        exact += usize::from(pred == truth);
    }
    if total == 0 {
        0.0
    } else {
        100.0 * exact as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// Per-document scores and the filter table

/// Scores of one prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub true_positives: usize,
    pub predicted: usize,
    pub expected: usize,
    pub nted: f64,
    pub exact: bool,
    pub valid: bool,
}

impl DocScore {
    pub fn f1(&self) -> F1Score {
        F1Score::from_counts(self.true_positives, self.predicted, self.expected)
    }
}

/// Ground truth prepared once for scoring many predictions.
#[derive(Debug, Clone)]
pub struct Truth {
    pub bag: FieldBag,
    pub tree: DocTree,
}

impl Truth {
    pub fn new(doc: &ImplicitDocument, schema: &SchemaDef) -> Self {
        Truth {
            bag: flatten(doc, schema),
            tree: DocTree::from_document(doc, schema),
        }
    }
}

/// Scores a resolved prediction; `None` stands for an unparseable output,
/// scored as an empty, invalid prediction.
pub fn score(
    prediction: Option<(&ImplicitDocument, bool)>,
    truth: &Truth,
    schema: &SchemaDef,
) -> Result<DocScore, MetricsError> {
    let (bag, tree, valid) = match prediction {
        Some((doc, valid)) => (flatten(doc, schema), DocTree::from_document(doc, schema), valid),
        None => (FieldBag::default(), DocTree::empty(), false),
    };
    Ok(DocScore {
        true_positives: bag.overlap(&truth.bag),
        predicted: bag.len(),
        expected: truth.bag.len(),
        nted: nted(&tree, &truth.tree)?,
        exact: tree == truth.tree,
        valid,
    })
}

/// Rows of the filter table: the unfiltered base plus one per cascade level.
pub const ROW_NAMES: [&str; 4] = ["Base", "Syntactic", "Task", "Domain"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub filter: String,
    pub documents: usize,
    pub remaining: f64,
    /// Metrics are `None` when no document remains.
    pub f1: Option<f64>,
    pub nted: Option<f64>,
    pub valid: Option<f64>,
    pub doc_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTable {
    pub total_documents: usize,
    pub rows: Vec<FilterRow>,
}

/// Builds the table from per-document scores, one entry per row in
/// [`ROW_NAMES`] order; `None` marks a document filtered out at that row.
/// Every metric is computed over the documents remaining in that row only.
pub fn filter_table(docs: &[[Option<DocScore>; 4]]) -> FilterTable {
    let total = docs.len();
    let rows = ROW_NAMES
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let kept: Vec<&DocScore> = docs.iter().filter_map(|d| d[r].as_ref()).collect();
            let n = kept.len();
            let pct = |count: usize| 100.0 * count as f64 / n as f64;
            let (f1, nted, valid, acc) = if n == 0 {
                (None, None, None, None)
            } else {
                let (tp, p, e) = kept.iter().fold((0, 0, 0), |(tp, p, e), s| {
                    (tp + s.true_positives, p + s.predicted, e + s.expected)
                });
                (
                    Some(100.0 * F1Score::from_counts(tp, p, e).f1),
                    Some(100.0 * kept.iter().map(|s| s.nted).sum::<f64>() / n as f64),
                    Some(pct(kept.iter().filter(|s| s.valid).count())),
                    Some(pct(kept.iter().filter(|s| s.exact).count())),
                )
            };
            FilterRow {
                filter: name.to_string(),
                documents: n,
                remaining: if total == 0 {
                    0.0
                } else {
                    100.0 * n as f64 / total as f64
                },
                f1,
                nted,
                valid,
                doc_accuracy: acc,
            }
        })
        .collect();
    FilterTable {
        total_documents: total,
        rows,
    }
}

fn one_decimal(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

impl FilterTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>11} {:>7} {:>7} {:>7} {:>10}",
            "Filter", "% Remaining", "F1", "nTED", "Valid", "Doc. Acc."
        );
        for (i, row) in self.rows.iter().enumerate() {
            let name = if i == 0 {
                row.filter.clone()
            } else {
                format!("- {}", row.filter)
            };
            let _ = writeln!(
                out,
                "{:<12} {:>11.1} {:>7} {:>7} {:>7} {:>10}",
                name,
                row.remaining,
                one_decimal(row.f1),
                one_decimal(row.nted),
                one_decimal(row.valid),
                one_decimal(row.doc_accuracy)
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("filter,documents,remaining,f1,nted,valid,doc_accuracy\n");
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_default();
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.1},{},{},{},{}",
                row.filter,
                row.documents,
                row.remaining,
                cell(row.f1),
                cell(row.nted),
                cell(row.valid),
                cell(row.doc_accuracy)
            );
        }
        out
    }
}

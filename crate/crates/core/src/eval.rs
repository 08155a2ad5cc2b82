//! Multi-label classification metrics, the downstream classifier, and
//! cross-modal label search.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_text, write_atomic};
use crate::error::{DmanError, Result};
use crate::graph::epoch_shuffle;
use crate::losses::weighted_bce_with;
use crate::model::glorot;
use crate::optim::{Parameterized, Sgd, SgdConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Node embeddings with their ground-truth label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<usize>, vectors: Vec<Vec<f64>>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if ids.len() != vectors.len() || vectors.len() != labels.len() {
            return Err(DmanError::Input(format!(
                "{} ids, {} vectors and {} label sets",
                ids.len(),
                vectors.len(),
                labels.len()
            )));
        }
        if let Some(w) = vectors.first().map(Vec::len) {
            if let Some(i) = vectors.iter().position(|v| v.len() != w) {
                return Err(DmanError::Input(format!("embedding {i} has width {}, expected {w}", vectors[i].len())));
            }
        }
        if let Some(i) = vectors.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(DmanError::Input(format!("embedding of node {} is not finite", ids[i])));
        }
        Ok(Self { ids, vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Rows as a binary `N × C` matrix.
    pub fn truth(&self, classes: usize) -> Vec<Vec<bool>> {
        label_matrix(&self.labels, classes)
    }
}

pub fn label_matrix(labels: &[Vec<usize>], classes: usize) -> Vec<Vec<bool>> {
    labels
        .iter()
        .map(|set| (0..classes).map(|c| set.contains(&c)).collect())
        .collect()
}

/// One embeddings file row. `train` marks the side of the split the node fell on.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: usize,
    pub train: bool,
    pub labels: Vec<usize>,
    pub vector: Vec<f64>,
}

/// Tab-separated: `id  split  labels  e0  e1 ...`, floats in shortest
/// round-trip form.
pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut out = String::new();
    let width = rows.first().map_or(0, |r| r.vector.len());
    out.push_str("id\tsplit\tlabels");
    for k in 0..width {
        let _ = write!(out, "\te{k}");
    }
    out.push('\n');
    for r in rows {
        let labels: Vec<String> = r.labels.iter().map(usize::to_string).collect();
        let _ = write!(out, "{}\t{}\t{}", r.id, if r.train { "train" } else { "test" }, labels.join(","));
        for v in &r.vector {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = read_text(path)?;
    let bad = |line: usize, msg: &str| DmanError::Parse {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(bad(i + 1, "too few columns"));
        }
        let id = cols[0].parse().map_err(|_| bad(i + 1, "bad id"))?;
        let train = match cols[1] {
            "train" => true,
            "test" => false,
            _ => return Err(bad(i + 1, "split must be train or test")),
        };
        let labels = if cols[2].is_empty() {
            Vec::new()
        } else {
            cols[2]
                .split(',')
                .map(|s| s.parse().map_err(|_| bad(i + 1, "bad label")))
                .collect::<Result<_>>()?
        };
        let vector = cols[3..]
            .iter()
            .map(|s| s.parse().map_err(|_| bad(i + 1, "bad float")))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow { id, train, labels, vector });
    }
    Ok(rows)
}

/// Collects the rows on one side of the split.
pub fn select_split(rows: &[EmbeddingRow], train: bool) -> Result<EmbeddingSet> {
    let picked: Vec<&EmbeddingRow> = rows.iter().filter(|r| r.train == train).collect();
    EmbeddingSet::new(
        picked.iter().map(|r| r.id).collect(),
        picked.iter().map(|r| r.vector.clone()).collect(),
        picked.iter().map(|r| r.labels.clone()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes that never got a positive prediction (precision counted as 0).
    pub classes_without_predictions: usize,
    /// Classes with no positive ground truth (recall counted as 0).
    pub classes_without_positives: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_shapes<T, U>(a: &[Vec<T>], b: &[Vec<U>]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(DmanError::Input(format!("{} prediction rows vs {} truth rows", a.len(), b.len())));
    }
    let c = b.first().map_or(0, Vec::len);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != c || y.len() != c {
            return Err(DmanError::Input(format!(
                "row {i}: {} predictions and {} truth columns, expected {c}",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(c)
}

pub fn classify_metrics(predictions: &[Vec<f64>], truth: &[Vec<bool>], threshold: f64) -> Result<ClassificationMetrics> {
    let c = check_shapes(predictions, truth)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DmanError::Input(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for (p, t) in predictions.iter().zip(truth) {
        for k in 0..c {
            match (p[k] > threshold, t[k]) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fn_[k] += 1,
                (false, false) => {}
            }
        }
    }
    let (stp, sfp, sfn): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let micro_precision = ratio(stp, stp + sfp);
    let micro_recall = ratio(stp, stp + sfn);
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let p = ratio(tp[k], tp[k] + fp[k]);
        let r = ratio(tp[k], tp[k] + fn_[k]);
        mp += p;
        mr += r;
        mf += f1(p, r);
    }
    let cf = c.max(1) as f64;
    Ok(ClassificationMetrics {
        micro_precision,
        micro_recall,
        micro_f1: f1(micro_precision, micro_recall),
        macro_precision: mp / cf,
        macro_recall: mr / cf,
        macro_f1: mf / cf,
        classes_without_predictions: (0..c).filter(|&k| tp[k] + fp[k] == 0).count(),
        classes_without_positives: (0..c).filter(|&k| tp[k] + fn_[k] == 0).count(),
    })
}

/// Average precision of one ranking given relevance flags in rank order.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevant_in_rank_order.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Indices sorted by `key` ascending, ties kept in index order.
fn stable_order(n: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

pub fn mean_average_precision(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<MapReport> {
    let c = check_shapes(scores, truth)?;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let order = stable_order(scores.len(), |i| -scores[i][k]);
        let rel: Vec<bool> = order.iter().map(|&i| truth[i][k]).collect();
        per_class.push(average_precision(&rel));
    }
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    let excluded: Vec<usize> = (0..c).filter(|&k| per_class[k].is_none()).collect();
    if !excluded.is_empty() {
        log::warn!("mAP: classes {excluded:?} have no positives and are excluded");
    }
    if kept.is_empty() {
        return Err(DmanError::Degenerate("mAP: no class has a positive item".into()));
    }
    Ok(MapReport {
        map: kept.iter().sum::<f64>() / kept.len() as f64,
        per_class,
        excluded,
    })
}

/// One-hot query at the vocabulary index of a label word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryVector {
    pub label: usize,
    pub word: usize,
    pub dim: usize,
}

impl QueryVector {
    pub fn new(label: usize, word: Option<usize>, dim: usize) -> Result<Self> {
        match word {
            Some(w) if w < dim => Ok(Self { label, word: w, dim }),
            Some(w) => Err(DmanError::Input(format!("label {label}: word {w} outside vocabulary of {dim}"))),
            None => Err(DmanError::Input(format!("label {label} has no word in the vocabulary"))),
        }
    }

    pub fn vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[self.word] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub ks: Vec<usize>,
    /// Mean over queries, aligned with `ks`.
    pub precision: Vec<f64>,
    /// `per_query[q][i]` is p@ks[i] of query `q`.
    pub per_query: Vec<Vec<f64>>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks every embedding by Euclidean distance to each query.
pub fn cross_modal_search(queries: &[QueryVector], set: &EmbeddingSet, ks: &[usize]) -> Result<SearchReport> {
    if set.is_empty() {
        return Err(DmanError::Input("search over an empty embedding set".into()));
    }
    if queries.is_empty() {
        return Err(DmanError::Input("no queries".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > set.len()) {
        return Err(DmanError::Input(format!("k={k} outside 1..={}", set.len())));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        if q.dim != set.dim() {
            return Err(DmanError::Input(format!("query width {} vs embedding width {}", q.dim, set.dim())));
        }
        if !set.labels.iter().any(|l| l.contains(&q.label)) {
            return Err(DmanError::Input(format!("query label {} has no relevant item", q.label)));
        }
        let qv = q.vector();
        // squared distance ranks identically and avoids a sqrt per item
        let dist: Vec<f64> = set.vectors.iter().map(|v| squared_distance(&qv, v)).collect();
        let order = stable_order(set.len(), |i| dist[i]);
        let row = ks
            .iter()
            .map(|&k| {
                let hits = order[..k].iter().filter(|&&i| set.labels[i].contains(&q.label)).count();
                hits as f64 / k as f64
            })
            .collect();
        per_query.push(row);
    }
    let precision = (0..ks.len())
        .map(|i| per_query.iter().map(|r: &Vec<f64>| r[i]).sum::<f64>() / per_query.len() as f64)
        .collect();
    Ok(SearchReport {
        ks: ks.to_vec(),
        precision,
        per_query,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 64],
            epochs: 200,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 {
            return Err(DmanError::Config("classifier hidden sizes and batch_size must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DmanError::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        self.sgd().validate()
    }
}

const CLASSIFIER_BLOCKS: [&str; 6] = ["clf.w1", "clf.b1", "clf.w2", "clf.b2", "clf.w3", "clf.b3"];

/// `in → h1 → h2 → C`, tanh hidden, sigmoid out. Weights are stored
/// `[out, in]` and biases `[out, 1]` so a batch runs as `W · Xᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamClassifier {
    /// Original class index of each output column.
    pub classes: Vec<usize>,
    blocks: Vec<Tensor>,
}

impl Parameterized for DownstreamClassifier {
    fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        CLASSIFIER_BLOCKS.iter().copied().zip(self.blocks.iter()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        CLASSIFIER_BLOCKS.iter().copied().zip(self.blocks.iter_mut()).collect()
    }
}

impl DownstreamClassifier {
    /// Glorot hidden layers; the output layer starts at zero so an untrained
    /// head predicts 0.5 everywhere.
    pub fn new(input: usize, classes: Vec<usize>, hidden: [usize; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, h2, c) = (hidden[0], hidden[1], classes.len());
        let blocks = vec![
            glorot(vec![h1, input], input, h1, &mut rng),
            Tensor::zeros(vec![h1, 1]),
            glorot(vec![h2, h1], h1, h2, &mut rng),
            Tensor::zeros(vec![h2, 1]),
            Tensor::zeros(vec![c, h2]),
            Tensor::zeros(vec![c, 1]),
        ];
        Self { classes, blocks }
    }

    fn forward(&self, tape: &mut Tape, x: &[&Vec<f64>], trainable: bool) -> Result<(Var, Vec<Var>)> {
        let width = self.blocks[0].shape()[1];
        let mut flat = Vec::with_capacity(x.len() * width);
        for row in x {
            if row.len() != width {
                return Err(DmanError::Input(format!("classifier input width {} vs {width}", row.len())));
            }
            flat.extend_from_slice(row);
        }
        let xt = tape.constant(Tensor::new(vec![x.len(), width], flat)?);
        let xt = tape.transpose(xt)?;
        let vars: Vec<Var> = self.blocks.iter().map(|b| tape.leaf(b.clone(), trainable)).collect();
        let mut h = xt;
        for layer in 0..3 {
            let z = tape.matmul(vars[2 * layer], h)?;
            let z = tape.add(z, vars[2 * layer + 1])?;
            h = if layer < 2 { tape.tanh(z)? } else { tape.sigmoid(z)? };
        }
        Ok((h, vars))
    }

    /// `N × C` probabilities, columns in `self.classes` order.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let c = self.classes.len();
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let rows: Vec<&Vec<f64>> = x.iter().collect();
        let (out, _) = self.forward(&mut tape, &rows, false)?;
        let v = tape.value(out).data();
        let n = x.len();
        Ok((0..n).map(|i| (0..c).map(|k| v[k * n + i]).collect()).collect())
    }

    /// Mean unweighted BCE over `rows`, `truth` indexed by original class.
    pub fn loss(&self, x: &[Vec<f64>], labels: &[Vec<usize>]) -> Result<f64> {
        let p = self.predict(x)?;
        let eps = 1e-7;
        let mut total = 0.0;
        for (row, set) in p.iter().zip(labels) {
            for (k, &c) in self.classes.iter().enumerate() {
                let y = row[k].clamp(eps, 1.0 - eps);
                total -= if set.contains(&c) { y.ln() } else { (1.0 - y).ln() };
            }
        }
        Ok(total / x.len().max(1) as f64)
    }
}

/// Trains the downstream head on frozen embeddings. Classes with no
/// positive training example are dropped with a warning.
pub fn train_downstream_classifier(
    train: &EmbeddingSet,
    classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<DownstreamClassifier> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DmanError::Input("classifier training set is empty".into()));
    }
    let present: Vec<usize> = (0..classes)
        .filter(|c| train.labels.iter().any(|l| l.contains(c)))
        .collect();
    let absent: Vec<usize> = (0..classes).filter(|c| !present.contains(c)).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no training example and are excluded");
    }
    if present.is_empty() {
        return Err(DmanError::Degenerate("no class has a training example".into()));
    }
    let mut clf = DownstreamClassifier::new(train.dim(), present, cfg.hidden, seed);
    let mut opt = Sgd::new(cfg.sgd(), &clf);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..cfg.epochs {
        let order = epoch_shuffle((0..train.len()).collect(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let rows: Vec<&Vec<f64>> = batch.iter().map(|&i| &train.vectors[i]).collect();
            let (out, vars) = clf.forward(&mut tape, &rows, true)?;
            let n = batch.len();
            let mut target = vec![0.0; clf.classes.len() * n];
            for (k, c) in clf.classes.iter().enumerate() {
                for (j, &i) in batch.iter().enumerate() {
                    if train.labels[i].contains(c) {
                        target[k * n + j] = 1.0;
                    }
                }
            }
            let sum = weighted_bce_with(&mut tape, out, &target, 1.0, 1e-7)?;
            let loss = tape.scale(sum, 1.0 / n as f64)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            opt.step(&mut clf, &grads)?;
        }
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutcome {
    pub metrics: ClassificationMetrics,
    pub map: MapReport,
    /// Original class index of each evaluated column.
    pub classes: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Train on `train`, score `test` over the classes the classifier kept.
pub fn evaluate_classification(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassificationOutcome> {
    let clf = train_downstream_classifier(train, classes, cfg, seed)?;
    let scores = clf.predict(&test.vectors)?;
    let truth: Vec<Vec<bool>> = test
        .labels
        .iter()
        .map(|set| clf.classes.iter().map(|c| set.contains(c)).collect())
        .collect();
    let metrics = classify_metrics(&scores, &truth, cfg.threshold)?;
    let map = mean_average_precision(&scores, &truth)?;
    let excluded = (0..classes).filter(|c| !clf.classes.contains(c)).collect();
    Ok(ClassificationOutcome {
        metrics,
        map,
        classes: clf.classes,
        excluded,
    })
}

/// Named metric values, one output row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub values: Vec<(String, f64)>,
}

impl MetricRow {
    pub fn classification(name: &str, o: &ClassificationOutcome) -> Self {
        let m = &o.metrics;
        Self {
            name: name.into(),
            values: vec![
                ("micro_p".into(), m.micro_precision),
                ("micro_r".into(), m.micro_recall),
                ("micro_f1".into(), m.micro_f1),
                ("macro_p".into(), m.macro_precision),
                ("macro_r".into(), m.macro_recall),
                ("macro_f1".into(), m.macro_f1),
                ("map".into(), o.map.map),
            ],
        }
    }

    pub fn search(name: &str, r: &SearchReport) -> Self {
        Self {
            name: name.into(),
            values: r.ks.iter().zip(&r.precision).map(|(k, p)| (format!("p@{k}"), *p)).collect(),
        }
    }
}

/// Tab-separated table: a `model` column then one column per metric.
pub fn metrics_table(rows: &[MetricRow]) -> String {
    let mut out = String::from("model");
    if let Some(first) = rows.first() {
        for (k, _) in &first.values {
            let _ = write!(out, "\t{k}");
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.name);
        for (_, v) in &r.values {
            let _ = write!(out, "\t{v:.4}");
        }
        out.push('\n');
    }
    out
}

/// `model.metric=value` lines at full precision.
pub fn metrics_kv(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    for r in rows {
        for (k, v) in &r.values {
            let _ = writeln!(out, "{}.{k}={v:?}", r.name);
        }
    }
    out
}

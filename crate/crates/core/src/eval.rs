//! Retrieval, AUC, zero-shot and linear-probe evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;
use crate::trainer::gather_rows;
use crate::data::PairedDataset;

/// Fraction of queries whose paired gallery row (same index) ranks within the
/// top `k` by dot-product similarity. Equal scores rank the lower gallery
/// index first.
pub fn recall_at_k(queries: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    let n = queries.rows();
    if queries.shape().len() != 2 || gallery.shape() != queries.shape() {
        return Err(Error::dim("recall_at_k", format!("queries {:?}, gallery {:?}", queries.shape(), gallery.shape())));
    }
    if k < 1 || k > n {
        return Err(Error::Parameter(format!("k = {k} outside [1, {n}]")));
    }
    let sims = queries.matmul_nt(gallery)?;
    let hits = (0..n)
        .filter(|&i| {
            let row = sims.row(i);
            let s = row[i];
            let rank = row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < i)).count();
            rank < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mann–Whitney AUC with mid-ranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc_roc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc_roc"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group shares its mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn one_vs_rest(scores: &Tensor, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let col: Vec<f64> = (0..scores.rows()).map(|i| scores.row(i)[c]).collect();
            let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_roc(&col, &is_c)
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub per_class_auc: Vec<f64>,
    pub macro_auc: f64,
}

/// Classifies each embedding by its most similar anchor.
pub fn zero_shot_classify(embeddings: &Tensor, anchors: &Tensor, labels: &[usize]) -> Result<ZeroShotResult> {
    let classes = anchors.rows();
    if anchors.shape().len() != 2 || classes < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 anchors, got shape {:?}", anchors.shape())));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::dim("zero_shot_classify", format!("{} rows, {} labels", embeddings.rows(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!("label {l} out of range for {classes} anchors")));
    }
    let sims = embeddings.matmul_nt(anchors)?;
    let correct = (0..sims.rows()).filter(|&i| argmax(sims.row(i)) == labels[i]).count();
    let per_class_auc = one_vs_rest(&sims, labels, classes)?;
    let macro_auc = per_class_auc.iter().sum::<f64>() / classes as f64;
    Ok(ZeroShotResult { accuracy: correct as f64 / labels.len() as f64, per_class_auc, macro_auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Share of each class's training samples used to fit the head.
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { fraction: 0.1, epochs: 300, lr: 0.5, l2: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub macro_auc: f64,
    pub per_class_auc: Vec<f64>,
    pub accuracy: f64,
    pub train_samples: usize,
}

/// Stratified subset: `ceil(fraction · n_c)` rows of every class present.
fn stratified_subset(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, stream::PROBE, &[]);
    let mut picked = Vec::new();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let take = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len());
        picked.extend_from_slice(&rows[..take]);
    }
    picked.sort_unstable();
    picked
}

/// Softmax-regression head trained by full-batch gradient descent on a
/// stratified `fraction` of the training embeddings; scored on the test set.
pub fn linear_probe(
    train_emb: &Tensor,
    train_labels: &[usize],
    test_emb: &Tensor,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Parameter(format!("probe fraction {} outside (0, 1]", cfg.fraction)));
    }
    if classes < 2 {
        return Err(Error::Config("probe needs at least 2 classes".into()));
    }
    if train_emb.rows() != train_labels.len() || test_emb.rows() != test_labels.len() || train_emb.cols() != test_emb.cols() {
        return Err(Error::dim("linear_probe", "embeddings and labels disagree"));
    }
    if let Some(&l) = train_labels.iter().chain(test_labels).find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!("label {l} out of range for {classes} classes")));
    }
    let rows = stratified_subset(train_labels, classes, cfg.fraction, seed);
    let x = train_emb.select_rows(&rows)?;
    let y: Vec<usize> = rows.iter().map(|&i| train_labels[i]).collect();
    let (n, d) = (x.rows(), x.cols());

    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = Tensor::zeros(&[classes]);
    for _ in 0..cfg.epochs {
        let mut delta = x.matmul(&w)?.add_row(&b)?.softmax_rows()?;
        for (i, &yi) in y.iter().enumerate() {
            delta.data_mut()[i * classes + yi] -= 1.0;
        }
        let delta = delta.scale(1.0 / n as f64)?;
        let gw = x.matmul_tn(&delta)?.add(&w.scale(cfg.l2)?)?;
        let gb = delta.sum_rows()?;
        w = w.sub(&gw.scale(cfg.lr)?)?;
        b = b.sub(&gb.scale(cfg.lr)?)?;
    }

    let probs = test_emb.matmul(&w)?.add_row(&b)?.softmax_rows()?;
    let correct = (0..probs.rows()).filter(|&i| argmax(probs.row(i)) == test_labels[i]).count();
    let per_class_auc = one_vs_rest(&probs, test_labels, classes)?;
    Ok(ProbeResult {
        macro_auc: per_class_auc.iter().sum::<f64>() / classes as f64,
        per_class_auc,
        accuracy: correct as f64 / test_labels.len() as f64,
        train_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { recall_ks: vec![1, 5, 10], probe: ProbeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub test_samples: usize,
    pub chance_recall_at_1: f64,
    /// Image-to-text retrieval.
    pub recall_at: BTreeMap<String, f64>,
    pub zero_shot: ZeroShotResult,
    pub probe: ProbeResult,
    pub probe_config: ProbeConfig,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("test samples".into(), self.test_samples.to_string()),
            ("chance R@1".into(), format!("{:.4}", self.chance_recall_at_1)),
        ];
        let mut ks: Vec<(usize, f64)> = self.recall_at.iter().map(|(k, v)| (k.parse().unwrap_or(0), *v)).collect();
        ks.sort_by_key(|&(k, _)| k);
        rows.extend(ks.into_iter().map(|(k, v)| (format!("R@{k}"), format!("{v:.4}"))));
        rows.push(("zero-shot accuracy".into(), format!("{:.4}", self.zero_shot.accuracy)));
        rows.push(("zero-shot macro AUC".into(), format!("{:.4}", self.zero_shot.macro_auc)));
        for (c, a) in self.zero_shot.per_class_auc.iter().enumerate() {
            rows.push((format!("zero-shot AUC class {c}"), format!("{a:.4}")));
        }
        rows.push(("probe accuracy".into(), format!("{:.4}", self.probe.accuracy)));
        rows.push(("probe macro AUC".into(), format!("{:.4}", self.probe.macro_auc)));
        rows.push(("probe train samples".into(), self.probe.train_samples.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

/// Image and text query-encoder embeddings for rows `ids`.
pub fn embed_split(model: &DualEncoder, data: &PairedDataset, ids: &[u64]) -> Result<(Tensor, Tensor)> {
    let image = model.image.query.encode_detached(&gather_rows(&data.features_a, ids)?)?;
    let text = model.text.query.encode_detached(&gather_rows(&data.features_b, ids)?)?;
    Ok((image, text))
}

/// Full evaluation of a trained model. `text_prototypes` holds the
/// noise-free class means in text feature space.
pub fn evaluate(
    model: &DualEncoder,
    data: &PairedDataset,
    train_ids: &[u64],
    test_ids: &[u64],
    text_prototypes: &Tensor,
    cfg: &EvalConfig,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let (test_img, test_txt) = embed_split(model, data, test_ids)?;
    let mut recall_at = BTreeMap::new();
    for &k in &cfg.recall_ks {
        recall_at.insert(k.to_string(), recall_at_k(&test_img, &test_txt, k)?);
    }
    let labels = |ids: &[u64]| -> Vec<usize> { ids.iter().map(|&i| data.labels[i as usize] as usize).collect() };
    let test_labels = labels(test_ids);
    let anchors = model.text.query.encode_detached(text_prototypes)?;
    let zero_shot = zero_shot_classify(&test_img, &anchors, &test_labels)?;
    let train_img = model.image.query.encode_detached(&gather_rows(&data.features_a, train_ids)?)?;
    let probe = linear_probe(&train_img, &labels(train_ids), &test_img, &test_labels, data.classes, &cfg.probe, seed)?;
    Ok(EvalReport {
        seed,
        test_samples: test_ids.len(),
        chance_recall_at_1: 1.0 / test_ids.len() as f64,
        recall_at,
        zero_shot,
        probe,
        probe_config: cfg.probe.clone(),
        config: config_echo,
    })
}

//! End-to-end steps shared by the command-line tool and the acceptance
//! suite: load nodes, train, embed, evaluate.

use crate::checkpoint::Checkpoint;
use crate::config::{ProviderKind, RunConfig};
use crate::data::{split_ids, subset, DatasetBundle};
use crate::error::{DmanError, Result};
use crate::eval::{
    cross_modal_search, evaluate_classification, select_split, ClassificationOutcome, EmbeddingRow, QueryVector,
    SearchReport,
};
use crate::graph::{build_graph, MultimodalGraph, MultimodalNode};
use crate::model::DmanModel;
use crate::trainer::{train_with, EpochStats, TrainReport, Trainer};

/// Every bundle node with regions from the configured provider.
pub fn load_nodes(bundle: &DatasetBundle, cfg: &RunConfig) -> Result<Vec<MultimodalNode>> {
    match cfg.data.provider {
        ProviderKind::Precomputed => bundle.to_nodes(),
        ProviderKind::PatchProjector => {
            let p = bundle.patch_projector(cfg.data.split_seed)?;
            bundle.to_nodes_with(&p)
        }
    }
}

/// Seeded train/test split of the bundle's node ids.
pub fn split(bundle: &DatasetBundle, cfg: &RunConfig) -> (Vec<usize>, Vec<usize>) {
    split_ids(bundle.manifest.n, cfg.data.train_fraction, cfg.data.split_seed)
}

/// Shared-label graph over the training nodes only, renumbered `0..`.
pub fn training_graph(nodes: &[MultimodalNode], train_ids: &[usize], cfg: &RunConfig) -> Result<MultimodalGraph> {
    build_graph(subset(nodes, train_ids), cfg.graph.max_links, cfg.train.seed)
}

/// Trains from scratch, or continues `resume` up to `cfg.train.epochs`.
/// `on_epoch` sees the checkpoint state after every epoch.
pub fn train_bundle<F>(
    bundle: &DatasetBundle,
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
    mut on_epoch: F,
) -> Result<(Checkpoint, TrainReport)>
where
    F: FnMut(&Checkpoint, &EpochStats) -> Result<()>,
{
    cfg.validate()?;
    let nodes = load_nodes(bundle, cfg)?;
    let first = nodes.first().ok_or_else(|| DmanError::Input("bundle has no nodes".into()))?;
    let (shape_d, shape_m) = (first.regions.regions(), first.regions.dim());
    let model_cfg = cfg.model.model_config(bundle.manifest.l, shape_d, shape_m);
    let (train_ids, mut model, mut trainer) = match resume {
        Some(ck) => {
            if ck.model.config != model_cfg {
                return Err(DmanError::Config(
                    "checkpoint model shape does not match this bundle and config".into(),
                ));
            }
            let t = Trainer::resume(
                &ck.model,
                cfg.train.clone(),
                cfg.triplet,
                cfg.joint,
                ck.velocity,
                ck.epoch,
                ck.rng,
            )?;
            (ck.train_ids, ck.model, t)
        }
        None => {
            let model = DmanModel::new(model_cfg, cfg.train.seed)?;
            let t = Trainer::new(&model, cfg.train.clone(), cfg.triplet, cfg.joint)?;
            (split(bundle, cfg).0, model, t)
        }
    };
    let graph = training_graph(&nodes, &train_ids, cfg)?;
    let snapshot = |t: &Trainer, m: &DmanModel| Checkpoint {
        run: cfg.clone(),
        model: m.clone(),
        velocity: t.velocity().to_vec(),
        epoch: t.epoch(),
        rng: t.rng_state(),
        train_ids: train_ids.clone(),
    };
    let report = train_with(&graph, &mut model, &mut trainer, |t, m, s| on_epoch(&snapshot(t, m), s))?;
    Ok((snapshot(&trainer, &model), report))
}

/// Eval-mode embeddings of every bundle node, tagged with their split side.
pub fn embed_bundle(bundle: &DatasetBundle, ck: &Checkpoint) -> Result<Vec<EmbeddingRow>> {
    let nodes = load_nodes(bundle, &ck.run)?;
    let vectors = ck.model.embed_all(nodes.iter().map(|n| &n.regions))?;
    Ok(nodes
        .iter()
        .zip(vectors)
        .map(|(n, vector)| EmbeddingRow {
            id: n.id,
            train: ck.train_ids.binary_search(&n.id).is_ok(),
            labels: n.labels().to_vec(),
            vector,
        })
        .collect())
}

/// One query per label whose name is a vocabulary word and which has a
/// relevant test item. Other labels are skipped with a warning.
pub fn label_queries(bundle: &DatasetBundle, rows: &[EmbeddingRow]) -> Vec<QueryVector> {
    let l = bundle.manifest.l;
    (0..bundle.manifest.c)
        .filter_map(|c| {
            let has_test = rows.iter().any(|r| !r.train && r.labels.contains(&c));
            match QueryVector::new(c, bundle.label_word(c), l) {
                Ok(q) if has_test => Some(q),
                Ok(_) => {
                    log::warn!("label {c} has no test item; query skipped");
                    None
                }
                Err(e) => {
                    log::warn!("{e}; query skipped");
                    None
                }
            }
        })
        .collect()
}

pub fn search(bundle: &DatasetBundle, rows: &[EmbeddingRow], ks: &[usize]) -> Result<SearchReport> {
    let test = select_split(rows, false)?;
    cross_modal_search(&label_queries(bundle, rows), &test, ks)
}

pub fn classify(bundle: &DatasetBundle, rows: &[EmbeddingRow], cfg: &RunConfig) -> Result<ClassificationOutcome> {
    let train = select_split(rows, true)?;
    let test = select_split(rows, false)?;
    evaluate_classification(&train, &test, bundle.manifest.c, &cfg.classifier, cfg.train.seed)
}

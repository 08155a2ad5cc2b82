//! Mini-batch training of the joint objective.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DmanError, Result};
use crate::graph::{epoch_shuffle, sample_triplets, MultimodalGraph, Triplet};
use crate::losses::{joint_loss, JointLoss, JointLossConfig, TripletLossConfig, TripletVars};
use crate::model::{forward, DmanModel, Forward, ModelConfig, ModelVars};
use crate::optim::{clip_global_norm, Parameterized, Sgd, SgdConfig};
use crate::tensor::{Tape, Tensor};

/// How one batch's summed objective is scaled before the gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchReduction {
    /// Divide by the number of batch nodes.
    #[default]
    Mean,
    /// Use the plain sum.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives drawn per anchor.
    pub negatives: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm cap per step.
    pub grad_clip: Option<f64>,
    pub batch_reduction: BatchReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            epochs: 300,
            batch_size: 64,
            negatives: 3,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            batch_reduction: BatchReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.epochs == 0 {
            return Err(DmanError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DmanError::Config("batch_size must be at least 1".into()));
        }
        if self.negatives == 0 {
            return Err(DmanError::Config("negatives per anchor (K) must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(DmanError::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub joint: f64,
    pub hinge: f64,
    pub bce: f64,
    pub triplets: usize,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// SHA-256 over the little-endian bytes of every parameter block.
    pub checksum: String,
}

impl TrainReport {
    /// Tab-separated table, one row per epoch, checksum as a trailing comment.
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\tjoint\thinge\tbce\ttriplets\tskipped\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}\t{:.4}",
                e.epoch, e.joint, e.hinge, e.bce, e.triplets, e.skipped, e.seconds
            );
        }
        let _ = writeln!(s, "# checksum\t{}", self.checksum);
        s
    }
}

pub fn parameter_checksum<P: Parameterized + ?Sized>(model: &P) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.blocks() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Generator position, enough to resume a run exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub joint: f64,
    pub hinge: f64,
    pub bce: f64,
    pub triplets: usize,
    pub skipped: usize,
}

/// Optimizer and sampler state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub triplet: TripletLossConfig,
    pub joint: JointLossConfig,
    sgd: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(
        model: &DmanModel,
        config: TrainConfig,
        triplet: TripletLossConfig,
        joint: JointLossConfig,
    ) -> Result<Self> {
        config.validate()?;
        triplet.validate()?;
        joint.validate()?;
        Ok(Self {
            sgd: Sgd::new(config.sgd(), model),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            config,
            triplet,
            joint,
        })
    }

    /// Resumes from saved velocity, epoch counter and generator position.
    pub fn resume(
        model: &DmanModel,
        config: TrainConfig,
        triplet: TripletLossConfig,
        joint: JointLossConfig,
        velocity: Vec<Tensor>,
        epoch: usize,
        rng: RngState,
    ) -> Result<Self> {
        let mut t = Self::new(model, config, triplet, joint)?;
        if velocity.len() != t.sgd.velocity.len()
            || velocity.iter().zip(&t.sgd.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(DmanError::Input("velocity buffers do not match the model".into()));
        }
        t.sgd.velocity = velocity;
        t.epoch = epoch;
        t.rng = rng.restore();
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.sgd.velocity
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, graph: &MultimodalGraph, model: &mut DmanModel, batch: &[usize]) -> Result<StepStats> {
        let sampled = sample_triplets(graph, batch, self.config.negatives, &mut self.rng)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true)?;
        let loss = batch_objective(
            &mut tape,
            &vars,
            &model.config,
            graph,
            batch,
            &sampled.triplets,
            &self.triplet,
            &self.joint,
            self.config.batch_reduction,
            &mut self.rng,
        )?;
        let stats = StepStats {
            joint: tape.value(loss.total).item(),
            hinge: tape.value(loss.hinge).item(),
            bce: tape.value(loss.bce).item(),
            triplets: sampled.triplets.len(),
            skipped: sampled.skipped,
        };
        if !stats.joint.is_finite() {
            return Err(DmanError::Degenerate(format!("non-finite loss {}", stats.joint)));
        }
        tape.backward(loss.total)?;
        let mut grads = vars.grads(&tape, model)?;
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        self.sgd.step(model, &grads)?;
        Ok(stats)
    }

    /// Shuffles, partitions into consecutive batches and steps through them.
    pub fn run_epoch(&mut self, graph: &MultimodalGraph, model: &mut DmanModel) -> Result<EpochStats> {
        let start = Instant::now();
        let order = epoch_shuffle((0..graph.len()).collect(), &mut self.rng);
        let mut stats = EpochStats {
            epoch: self.epoch + 1,
            joint: 0.0,
            hinge: 0.0,
            bce: 0.0,
            triplets: 0,
            skipped: 0,
            seconds: 0.0,
        };
        for batch in order.chunks(self.config.batch_size) {
            let s = self.step(graph, model, batch)?;
            stats.joint += s.joint;
            stats.hinge += s.hinge;
            stats.bce += s.bce;
            stats.triplets += s.triplets;
            stats.skipped += s.skipped;
        }
        self.epoch += 1;
        stats.seconds = start.elapsed().as_secs_f64();
        Ok(stats)
    }
}

/// Builds the joint objective of one batch on `tape`: a training-mode
/// forward per distinct node, the ranking term over `triplets` and the
/// reconstruction term over every batch node, then `reduction` applied to
/// all three reported terms.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    graph: &MultimodalGraph,
    batch: &[usize],
    triplets: &[Triplet],
    triplet_cfg: &TripletLossConfig,
    joint_cfg: &JointLossConfig,
    reduction: BatchReduction,
    rng: &mut R,
) -> Result<JointLoss> {
    let kind = cfg.embedding;
    // One forward per distinct node; triplet members reuse it.
    let mut seen: HashMap<usize, Forward> = HashMap::new();
    let mut run = |tape: &mut Tape, id: usize, rng: &mut R| -> Result<Forward> {
        if let Some(f) = seen.get(&id) {
            return Ok(*f);
        }
        let f = forward(tape, vars, cfg, &graph.node(id).regions, true, rng)?;
        seen.insert(id, f);
        Ok(f)
    };
    let mut anchors = Vec::with_capacity(batch.len());
    for &id in batch {
        anchors.push((id, run(tape, id, rng)?));
    }
    let mut members = Vec::with_capacity(triplets.len());
    for t in triplets {
        let a = run(tape, t.anchor, rng)?;
        let p = run(tape, t.positive, rng)?;
        let n = run(tape, t.negative, rng)?;
        members.push(TripletVars {
            anchor: a.embedding(kind),
            positive: p.embedding(kind),
            negative: n.embedding(kind),
        });
    }
    let texts: Vec<Vec<f64>> = anchors.iter().map(|(id, _)| graph.node(*id).text()).collect();
    let pairs: Vec<_> = anchors
        .iter()
        .zip(&texts)
        .map(|((_, f), t)| (f.y, t.as_slice()))
        .collect();
    let loss = joint_loss(tape, &members, &pairs, triplet_cfg, joint_cfg)?;
    Ok(match reduction {
        BatchReduction::Sum => loss,
        BatchReduction::Mean => {
            let w = 1.0 / batch.len() as f64;
            JointLoss {
                total: tape.scale(loss.total, w)?,
                hinge: tape.scale(loss.hinge, w)?,
                bce: tape.scale(loss.bce, w)?,
            }
        }
    })
}

fn check_trainable(graph: &MultimodalGraph, model: &DmanModel) -> Result<()> {
    if graph.edge_count() == 0 {
        return Err(DmanError::Config("graph has no edges, so no triplets can be formed".into()));
    }
    let (d, m) = graph.region_shape();
    let c = &model.config;
    if (d, m, graph.vocab_size()) != (c.regions, c.feat_dim, c.vocab) {
        return Err(DmanError::Config(format!(
            "graph has D={d}, M_feat={m}, L={} but the model expects D={}, M_feat={}, L={}",
            graph.vocab_size(),
            c.regions,
            c.feat_dim,
            c.vocab
        )));
    }
    Ok(())
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
pub fn train_with<F>(
    graph: &MultimodalGraph,
    model: &mut DmanModel,
    trainer: &mut Trainer,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&Trainer, &DmanModel, &EpochStats) -> Result<()>,
{
    check_trainable(graph, model)?;
    let mut epochs = Vec::new();
    while trainer.epoch() < trainer.config.epochs {
        let stats = trainer.run_epoch(graph, model)?;
        log::debug!(
            "epoch {} joint {:.4} hinge {:.4} bce {:.4} skipped {}",
            stats.epoch,
            stats.joint,
            stats.hinge,
            stats.bce,
            stats.skipped
        );
        on_epoch(trainer, model, &stats)?;
        epochs.push(stats);
    }
    Ok(TrainReport {
        epochs,
        checksum: parameter_checksum(model),
    })
}

pub fn train(
    graph: &MultimodalGraph,
    model: &mut DmanModel,
    config: &TrainConfig,
    triplet: &TripletLossConfig,
    joint: &JointLossConfig,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, config.clone(), *triplet, *joint)?;
    train_with(graph, model, &mut trainer, |_, _, _| Ok(()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub nodes: usize,
    pub seconds_per_epoch: f64,
    pub triplets_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityProbe {
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of ln(seconds/epoch) against ln(N).
    pub slope: f64,
}

impl ComplexityProbe {
    pub fn to_table(&self) -> String {
        let mut s = String::from("nodes\tseconds_per_epoch\ttriplets_per_epoch\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}\t{}", r.nodes, r.seconds_per_epoch, r.triplets_per_epoch);
        }
        let _ = writeln!(s, "# loglog_slope\t{:.4}", self.slope);
        s
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Times epochs at each graph size with everything else fixed. Each size
/// runs `repeats` epochs from a fresh model; the fastest epoch counts.
pub fn complexity_probe<G>(
    sizes: &[usize],
    mut make_graph: G,
    model_config: &ModelConfig,
    config: &TrainConfig,
    triplet: &TripletLossConfig,
    joint: &JointLossConfig,
    repeats: usize,
) -> Result<ComplexityProbe>
where
    G: FnMut(usize) -> Result<MultimodalGraph>,
{
    let (lo, hi) = (
        sizes.iter().copied().min().unwrap_or(0),
        sizes.iter().copied().max().unwrap_or(0),
    );
    if sizes.len() < 3 || lo == 0 || hi < 8 * lo {
        return Err(DmanError::Config(format!(
            "complexity probe needs at least 3 sizes spanning 8x, got {sizes:?}"
        )));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let graph = make_graph(n)?;
        let mut model = DmanModel::new(model_config.clone(), config.seed)?;
        check_trainable(&graph, &model)?;
        let mut trainer = Trainer::new(&model, config.clone(), *triplet, *joint)?;
        let mut best = f64::INFINITY;
        let mut triplets = 0;
        for _ in 0..repeats.max(1) {
            let s = trainer.run_epoch(&graph, &mut model)?;
            best = best.min(s.seconds);
            triplets = s.triplets;
        }
        rows.push(ProbeRow {
            nodes: graph.len(),
            seconds_per_epoch: best,
            triplets_per_epoch: triplets,
        });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.nodes as f64, r.seconds_per_epoch)).collect();
    Ok(ComplexityProbe {
        slope: loglog_slope(&pts),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, MultimodalNode};
    use crate::regions::RegionFeatures;
    use rand::Rng;

    fn toy_graph(seed: u64) -> MultimodalGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (0..4)
            .map(|i| {
                let topic = i / 2;
                let data = (0..6)
                    .map(|j| {
                        let signal = if j % 3 == topic { 1.0 } else { 0.0 };
                        signal + 0.1 * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                let r = RegionFeatures::new(2, 3, data).unwrap();
                MultimodalNode::new(i, r, vec![topic * 2, topic * 2 + 1], 4, vec![topic]).unwrap()
            })
            .collect();
        build_graph(nodes, 50, seed).unwrap()
    }

    fn toy_model() -> DmanModel {
        let mut cfg = ModelConfig::new(4, 2, 3);
        cfg.hidden = [6, 4];
        DmanModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn loss_decreases_on_toy_graph() {
        let g = toy_graph(0);
        let mut m = toy_model();
        let cfg = TrainConfig { epochs: 30, batch_size: 4, ..Default::default() };
        let r = train(&g, &mut m, &cfg, &Default::default(), &Default::default()).unwrap();
        assert_eq!(r.epochs.len(), 30);
        assert!(r.epochs.iter().all(|e| e.joint.is_finite()));
        assert!(r.epochs[29].joint < r.epochs[0].joint, "{:?}", (r.epochs[0].joint, r.epochs[29].joint));
    }

    #[test]
    fn same_seed_same_checksum() {
        let g = toy_graph(0);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 11, ..Default::default() };
        let run = || {
            let mut m = toy_model();
            train(&g, &mut m, &cfg, &Default::default(), &Default::default()).unwrap().checksum
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn edgeless_graph_is_rejected() {
        let nodes = (0..3)
            .map(|i| {
                let r = RegionFeatures::new(2, 3, vec![0.1; 6]).unwrap();
                MultimodalNode::new(i, r, vec![0], 4, vec![i]).unwrap()
            })
            .collect();
        let g = build_graph(nodes, 50, 0).unwrap();
        let mut m = toy_model();
        let err = train(&g, &mut m, &TrainConfig::default(), &Default::default(), &Default::default()).unwrap_err();
        assert!(matches!(err, DmanError::Config(_)));
    }

    #[test]
    fn doubling_k_doubles_triplets() {
        // 12 nodes, 4 labels of 3: every anchor has 9 eligible negatives in a full batch.
        let nodes = (0..12)
            .map(|i| {
                let r = RegionFeatures::new(2, 3, vec![0.1 * i as f64; 6]).unwrap();
                MultimodalNode::new(i, r, vec![i % 4], 4, vec![i % 4]).unwrap()
            })
            .collect();
        let g = build_graph(nodes, 50, 0).unwrap();
        let count = |k: usize| {
            let mut m = toy_model();
            let cfg = TrainConfig { epochs: 1, batch_size: 12, negatives: k, ..Default::default() };
            let mut t = Trainer::new(&m, cfg, Default::default(), Default::default()).unwrap();
            t.run_epoch(&g, &mut m).unwrap().triplets
        };
        assert_eq!(count(3), 36);
        assert_eq!(count(6), 2 * count(3));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let g = toy_graph(2);
        let cfg = TrainConfig { epochs: 4, batch_size: 2, seed: 5, ..Default::default() };
        let mut full = toy_model();
        let r = train(&g, &mut full, &cfg, &Default::default(), &Default::default()).unwrap();

        let mut m = toy_model();
        let mut t = Trainer::new(&m, TrainConfig { epochs: 2, ..cfg.clone() }, Default::default(), Default::default())
            .unwrap();
        train_with(&g, &mut m, &mut t, |_, _, _| Ok(())).unwrap();
        let mut t2 = Trainer::resume(
            &m,
            cfg.clone(),
            Default::default(),
            Default::default(),
            t.velocity().to_vec(),
            t.epoch(),
            t.rng_state(),
        )
        .unwrap();
        let r2 = train_with(&g, &mut m, &mut t2, |_, _, _| Ok(())).unwrap();
        assert_eq!(r.checksum, r2.checksum);
        assert_eq!(r2.epochs.len(), 2);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.2))).collect();
        assert!((loglog_slope(&pts) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_narrow_range() {
        let cfg = ModelConfig::new(4, 2, 3);
        let err = complexity_probe(
            &[10, 20, 40],
            |_| Ok(toy_graph(0)),
            &cfg,
            &TrainConfig::default(),
            &Default::default(),
            &Default::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, DmanError::Config(_)));
    }
}

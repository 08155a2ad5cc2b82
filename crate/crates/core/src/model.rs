//! The attention pipeline: region features, per-word attention over
//! regions, attended features, then a word-local dense stack ending in one
//! sigmoid unit per vocabulary word.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmanError, Result};
use crate::optim::Parameterized;
use crate::regions::RegionFeatures;
use crate::tensor::{Tape, Tensor, Var};

/// Which per-node vector the ranking loss and retrieval see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// Sigmoid outputs `Y`.
    #[default]
    Probabilities,
    /// Pre-sigmoid outputs of the last word-local layer.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size `L`.
    pub vocab: usize,
    /// Regions per image `D`.
    pub regions: usize,
    /// Region feature dimension `M_feat`.
    pub feat_dim: usize,
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub embedding: EmbeddingKind,
}

impl ModelConfig {
    pub fn new(vocab: usize, regions: usize, feat_dim: usize) -> Self {
        Self {
            vocab,
            regions,
            feat_dim,
            hidden: [128, 32],
            dropout: 0.5,
            embedding: EmbeddingKind::Probabilities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.regions == 0 || self.feat_dim == 0 || self.hidden.contains(&0) {
            return Err(DmanError::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DmanError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// `w: [L, M_feat]`, `b: [L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Word-local stack `M_feat -> h1 -> h2 -> 1`. Block `k` of every tensor
/// belongs to word `k` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct LfcParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmanModel {
    pub config: ModelConfig,
    pub attention: AttentionParams,
    pub lfc: LfcParams,
}

pub(crate) fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("shape and length agree")
}

pub const BLOCK_NAMES: [&str; 8] = [
    "attention.w",
    "attention.b",
    "lfc.w1",
    "lfc.b1",
    "lfc.w2",
    "lfc.b2",
    "lfc.w3",
    "lfc.b3",
];

impl DmanModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, m) = (config.vocab, config.feat_dim);
        let [h1, h2] = config.hidden;
        let attention = AttentionParams {
            w: glorot(vec![l, m], m, l, &mut rng),
            b: Tensor::zeros(vec![l]),
        };
        let lfc = LfcParams {
            w1: glorot(vec![l, h1, m], m, h1, &mut rng),
            b1: Tensor::zeros(vec![l, h1]),
            w2: glorot(vec![l, h2, h1], h1, h2, &mut rng),
            b2: Tensor::zeros(vec![l, h2]),
            w3: glorot(vec![l, 1, h2], h2, 1, &mut rng),
            b3: Tensor::zeros(vec![l]),
        };
        Ok(Self {
            config,
            attention,
            lfc,
        })
    }

    /// Rebuilds a model from blocks in [`BLOCK_NAMES`] order.
    pub fn from_blocks(config: ModelConfig, blocks: Vec<Tensor>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if blocks.len() != BLOCK_NAMES.len() {
            return Err(DmanError::Input(format!("expected 8 parameter blocks, got {}", blocks.len())));
        }
        for ((name, t), b) in template.blocks().iter().zip(&blocks) {
            if t.shape() != b.shape() {
                return Err(DmanError::Input(format!(
                    "block `{name}` has shape {:?}, model expects {:?}",
                    b.shape(),
                    t.shape()
                )));
            }
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            config,
            attention: AttentionParams { w: next(), b: next() },
            lfc: LfcParams {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                w3: next(),
                b3: next(),
            },
        })
    }

    /// Puts every parameter block on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        let l = self.config.vocab;
        let mut put = |t: &Tensor, shape: Option<Vec<usize>>| -> Result<Var> {
            let t = match shape {
                Some(s) => t.clone().reshape(s)?,
                None => t.clone(),
            };
            Ok(tape.leaf(t, trainable))
        };
        Ok(ModelVars {
            attn_w: put(&self.attention.w, None)?,
            attn_b: put(&self.attention.b, Some(vec![l, 1]))?,
            w1: put(&self.lfc.w1, None)?,
            b1: put(&self.lfc.b1, None)?,
            w2: put(&self.lfc.w2, None)?,
            b2: put(&self.lfc.b2, None)?,
            w3: put(&self.lfc.w3, None)?,
            b3: put(&self.lfc.b3, Some(vec![l, 1]))?,
        })
    }

    /// Eval-mode forward on a private tape.
    pub fn infer(&self, regions: &RegionFeatures) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, &vars, &self.config, regions, false, &mut unused)?;
        Ok(Inference {
            y: tape.value(out.y).data().to_vec(),
            logits: tape.value(out.logits).data().to_vec(),
            attention: tape.value(out.attention).clone(),
        })
    }

    /// Eval-mode embeddings for many nodes, sharing one binding of the parameters.
    pub fn embed_all<'a>(&self, regions: impl IntoIterator<Item = &'a RegionFeatures>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::new();
        for r in regions {
            let f = forward(&mut tape, &vars, &self.config, r, false, &mut unused)?;
            out.push(tape.value(f.embedding(self.config.embedding)).data().to_vec());
        }
        Ok(out)
    }
}

impl Parameterized for DmanModel {
    fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        let a = &self.attention;
        let f = &self.lfc;
        BLOCK_NAMES
            .into_iter()
            .zip([&a.w, &a.b, &f.w1, &f.b1, &f.w2, &f.b2, &f.w3, &f.b3])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let a = &mut self.attention;
        let f = &mut self.lfc;
        BLOCK_NAMES
            .into_iter()
            .zip([
                &mut a.w, &mut a.b, &mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2, &mut f.w3, &mut f.b3,
            ])
            .collect()
    }
}

/// Tape handles for a bound [`DmanModel`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub attn_w: Var,
    /// Bias as an `[L, 1]` column.
    pub attn_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    /// Bias as an `[L, 1]` column.
    pub b3: Var,
}

impl ModelVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.attn_w, self.attn_b, self.w1, self.b1, self.w2, self.b2, self.w3, self.b3,
        ]
    }

    /// Handles for parameter blocks already on `tape` in block order and
    /// block shapes; the two `[L]` biases are reshaped to columns.
    pub fn from_blocks(tape: &mut Tape, blocks: &[Var]) -> Result<Self> {
        if blocks.len() != BLOCK_NAMES.len() {
            return Err(DmanError::Input(format!("expected 8 parameter blocks, got {}", blocks.len())));
        }
        let l = tape.shape(blocks[1])[0];
        Ok(Self {
            attn_w: blocks[0],
            attn_b: tape.reshape(blocks[1], vec![l, 1])?,
            w1: blocks[2],
            b1: blocks[3],
            w2: blocks[4],
            b2: blocks[5],
            w3: blocks[6],
            b3: tape.reshape(blocks[7], vec![l, 1])?,
        })
    }

    /// Gradients in block order and in the model's own block shapes.
    pub fn grads(&self, tape: &Tape, model: &DmanModel) -> Result<Vec<Tensor>> {
        self.all()
            .iter()
            .zip(model.blocks())
            .map(|(v, (_, p))| Ok(tape.grad_or_zeros(*v).reshape(p.shape().to_vec())?))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub y: Vec<f64>,
    pub logits: Vec<f64>,
    pub attention: Tensor,
}

/// Tape handles produced by one [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[L]` word confidences.
    pub y: Var,
    /// `[L]` pre-sigmoid values.
    pub logits: Var,
    /// `[L, D]` attention maps.
    pub attention: Var,
    /// `[L, D]` unnormalized scores.
    pub scores: Var,
    /// `[L, M_feat]` attended features.
    pub attended: Var,
}

impl Forward {
    pub fn embedding(&self, kind: EmbeddingKind) -> Var {
        match kind {
            EmbeddingKind::Probabilities => self.y,
            EmbeddingKind::Logits => self.logits,
        }
    }
}

/// `Z = tanh(w Rᵀ + b)`, shape `[L, D]`.
pub fn attention_scores(tape: &mut Tape, w: Var, b: Var, regions: Var) -> Result<Var> {
    let rt = tape.transpose(regions)?;
    let wr = tape.matmul(w, rt)?;
    let pre = tape.add(wr, b)?;
    Ok(tape.tanh(pre)?)
}

/// Row-wise softmax of the scores over regions.
pub fn attention_weights(tape: &mut Tape, scores: Var) -> Result<Var> {
    Ok(tape.softmax(scores, 1)?)
}

/// `U[k] = Σ_j A[k, j] R[j]`.
pub fn attend(tape: &mut Tape, attention: Var, regions: Var) -> Result<Var> {
    Ok(tape.matmul(attention, regions)?)
}

fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Word-local stack on attended features `[L, M_feat]`. Returns `(Y, logits)`,
/// both `[L]`. Dropout is applied after each hidden activation only when
/// `dropout` is given.
pub fn lfc_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    attended: Var,
    vars: &ModelVars,
    dropout_rate: Option<f64>,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let l = tape.shape(attended)[0];
    let a1 = tape.local_linear(attended, vars.w1, vars.b1)?;
    let mut h1 = tape.tanh(a1)?;
    if let Some(p) = dropout_rate {
        h1 = dropout(tape, h1, p, rng)?;
    }
    let a2 = tape.local_linear(h1, vars.w2, vars.b2)?;
    let mut h2 = tape.tanh(a2)?;
    if let Some(p) = dropout_rate {
        h2 = dropout(tape, h2, p, rng)?;
    }
    let z = tape.local_linear(h2, vars.w3, vars.b3)?;
    let logits = tape.reshape(z, vec![l])?;
    let y = tape.sigmoid(logits)?;
    Ok((y, logits))
}

/// Full pipeline from region features to word confidences.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    regions: &RegionFeatures,
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    if regions.dim() != config.feat_dim || regions.regions() != config.regions {
        return Err(DmanError::Input(format!(
            "regions have shape {}x{}, model expects {}x{}",
            regions.regions(),
            regions.dim(),
            config.regions,
            config.feat_dim
        )));
    }
    let r = tape.constant(regions.to_tensor());
    let scores = attention_scores(tape, vars.attn_w, vars.attn_b, r)?;
    let attention = attention_weights(tape, scores)?;
    let attended = attend(tape, attention, r)?;
    let rate = training.then_some(config.dropout);
    let (y, logits) = lfc_forward(tape, attended, vars, rate, rng)?;
    Ok(Forward {
        y,
        logits,
        attention,
        scores,
        attended,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> DmanModel {
        let mut cfg = ModelConfig::new(3, 4, 2);
        cfg.hidden = [5, 3];
        DmanModel::new(cfg, seed).unwrap()
    }

    fn regions(seed: u64, d: usize, m: usize) -> RegionFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RegionFeatures::new(d, m, (0..d * m).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_attention_params_give_zero_scores() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(vec![3, 2]));
        let b = tape.constant(Tensor::zeros(vec![3, 1]));
        let r = tape.constant(regions(1, 4, 2).to_tensor());
        let z = attention_scores(&mut tape, w, b, r).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(z).shape(), &[3, 4]);
    }

    #[test]
    fn scalar_attention_score_by_hand() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let r = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 0.5]).unwrap());
        let z = attention_scores(&mut tape, w, b, r).unwrap();
        let d = tape.value(z).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn attention_weight_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![0.3; 4], vec![0.0, 3f64.ln(), 0.0, 0.0]]).unwrap());
        let a = attention_weights(&mut tape, z).unwrap();
        let d = tape.value(a).data();
        assert!(d[..4].iter().all(|v| (v - 0.25).abs() < 1e-15));
        // [0, ln3, 0, 0] -> [1, 3, 1, 1] / 6
        assert!((d[5] - 0.5).abs() < 1e-15);
        assert!((d[4] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn attend_one_hot_and_uniform() {
        let r = regions(2, 3, 2);
        let mut tape = Tape::new();
        let rv = tape.constant(r.to_tensor());
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0 / 3.0; 3]]).unwrap());
        let u = attend(&mut tape, a, rv).unwrap();
        let u = tape.value(u);
        assert_eq!(u.row(0), r.row(1));
        for m in 0..2 {
            let mean = (0..3).map(|j| r.row(j)[m]).sum::<f64>() / 3.0;
            assert!((u.row(1)[m] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attend_matches_double_loop() {
        let r = regions(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2, 3], raw).unwrap());
        let a = attention_weights(&mut tape, z).unwrap();
        let rv = tape.constant(r.to_tensor());
        let u = attend(&mut tape, a, rv).unwrap();
        let (av, uv) = (tape.value(a).clone(), tape.value(u).clone());
        for k in 0..2 {
            for m in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += av.data()[k * 3 + j] * r.data()[j * 2 + m];
                }
                assert_eq!(uv.data()[k * 2 + m], acc);
            }
        }
    }

    #[test]
    fn zero_lfc_gives_one_half() {
        let mut m = tiny(0);
        for (name, t) in m.blocks_mut() {
            if name.starts_with("lfc") {
                t.data_mut().fill(0.0);
            }
        }
        let inf = m.infer(&regions(5, 4, 2)).unwrap();
        assert_eq!(inf.y, vec![0.5; 3]);
    }

    #[test]
    fn lfc_matches_hand_rolled_per_word_forward() {
        let mut cfg = ModelConfig::new(2, 3, 2);
        cfg.hidden = [3, 2];
        let m = DmanModel::new(cfg, 8).unwrap();
        let r = regions(9, 3, 2);
        let inf = m.infer(&r).unwrap();

        let a = &inf.attention;
        let (h1, h2) = (3, 2);
        for k in 0..2 {
            let u: Vec<f64> = (0..2)
                .map(|c| (0..3).map(|j| a.data()[k * 3 + j] * r.row(j)[c]).sum())
                .collect();
            let layer = |w: &Tensor, b: &Tensor, x: &[f64], out: usize| -> Vec<f64> {
                (0..out)
                    .map(|o| {
                        let base = (k * out + o) * x.len();
                        let s: f64 = x.iter().enumerate().map(|(i, xi)| w.data()[base + i] * xi).sum();
                        s + b.data()[k * out + o]
                    })
                    .collect()
            };
            let a1: Vec<f64> = layer(&m.lfc.w1, &m.lfc.b1, &u, h1).iter().map(|v| v.tanh()).collect();
            let a2: Vec<f64> = layer(&m.lfc.w2, &m.lfc.b2, &a1, h2).iter().map(|v| v.tanh()).collect();
            let z = layer(&m.lfc.w3, &m.lfc.b3, &a2, 1)[0];
            let y = 1.0 / (1.0 + (-z).exp());
            assert!((inf.y[k] - y).abs() < 1e-14, "word {k}: {} vs {y}", inf.y[k]);
        }
    }

    #[test]
    fn perturbing_one_word_changes_only_its_output() {
        let m = tiny(1);
        let r = regions(6, 4, 2);
        let base = m.infer(&r).unwrap().y;
        let mut p = m.clone();
        // word 1 owns rows [5, 10) of w1 (h1 = 5, M_feat = 2)
        for v in &mut p.lfc.w1.data_mut()[10..20] {
            *v += 0.3;
        }
        p.lfc.b3.data_mut()[1] += 0.2;
        let y = p.infer(&r).unwrap().y;
        assert_eq!(y[0], base[0]);
        assert_eq!(y[2], base[2]);
        assert_ne!(y[1], base[1]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_composes() {
        let m = tiny(2);
        let r = regions(7, 4, 2);
        let a = m.infer(&r).unwrap();
        let b = m.infer(&r).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.attention, b.attention);

        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false).unwrap();
        let rv = tape.constant(r.to_tensor());
        let z = attention_scores(&mut tape, vars.attn_w, vars.attn_b, rv).unwrap();
        let att = attention_weights(&mut tape, z).unwrap();
        let u = attend(&mut tape, att, rv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = lfc_forward(&mut tape, u, &vars, None, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), a.y.as_slice());
    }

    #[test]
    fn dropout_only_in_training() {
        let m = tiny(3);
        let r = regions(8, 4, 2);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t1 = forward(&mut tape, &vars, &m.config, &r, true, &mut rng).unwrap();
        let t2 = forward(&mut tape, &vars, &m.config, &r, true, &mut rng).unwrap();
        assert_ne!(tape.value(t1.y), tape.value(t2.y));
        let e = forward(&mut tape, &vars, &m.config, &r, false, &mut rng).unwrap();
        assert_eq!(tape.value(e.y).data(), m.infer(&r).unwrap().y.as_slice());
    }

    #[test]
    fn rejects_mismatched_regions() {
        let m = tiny(0);
        assert!(m.infer(&regions(0, 4, 3)).is_err());
    }

    #[test]
    fn block_roundtrip() {
        let m = tiny(4);
        let blocks = m.blocks().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(DmanModel::from_blocks(m.config.clone(), blocks).unwrap(), m);
    }
}

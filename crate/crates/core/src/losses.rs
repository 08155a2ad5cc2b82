//! Ranking, reconstruction and joint objectives.

use serde::{Deserialize, Serialize};

use crate::error::{DmanError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    /// `a·b / (‖a‖ + ‖b‖)`.
    #[default]
    PaperSumNorm,
    /// `a·b / (‖a‖ ‖b‖)`.
    Cosine,
}

/// How the `K` triplets that share an anchor combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletReduction {
    #[default]
    Sum,
    /// Mean over each anchor's triplets, summed over anchors.
    MeanPerAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub similarity: SimilarityKind,
    pub reduction: TripletReduction,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            similarity: SimilarityKind::PaperSumNorm,
            reduction: TripletReduction::Sum,
        }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(DmanError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointLossConfig {
    /// Weight on positive-word log terms.
    pub lambda_pos: f64,
    /// Weight on the reconstruction term in the joint objective.
    pub beta: f64,
    /// Probabilities are clipped to `[clip_eps, 1 - clip_eps]` before `log`.
    pub clip_eps: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            lambda_pos: 10.0,
            beta: 1.0,
            clip_eps: 1e-7,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pos > 0.0) {
            return Err(DmanError::Config(format!("lambda_pos must be > 0, got {}", self.lambda_pos)));
        }
        if !(self.beta >= 0.0) {
            return Err(DmanError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(DmanError::Config(format!("clip_eps must be in (0, 0.5), got {}", self.clip_eps)));
        }
        Ok(())
    }
}

pub fn similarity(tape: &mut Tape, a: Var, b: Var, kind: SimilarityKind) -> Result<Var> {
    let (dot, na, nb) = tape.dot_and_norm(a, b)?;
    let (va, vb) = (tape.value(na).item(), tape.value(nb).item());
    let den = match kind {
        SimilarityKind::PaperSumNorm => {
            if va == 0.0 && vb == 0.0 {
                return Err(DmanError::Degenerate("similarity of two zero vectors".into()));
            }
            tape.add(na, nb)?
        }
        SimilarityKind::Cosine => {
            if va == 0.0 || vb == 0.0 {
                return Err(DmanError::Degenerate("cosine similarity with a zero vector".into()));
            }
            tape.mul(na, nb)?
        }
    };
    Ok(tape.div(dot, den)?)
}

/// `max(0, margin - Sim(a, p) + Sim(a, n))`.
pub fn hinge_triplet_loss(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, cfg: &TripletLossConfig) -> Result<Var> {
    let sp = similarity(tape, anchor, pos, cfg.similarity)?;
    let sn = similarity(tape, anchor, neg, cfg.similarity)?;
    let gap = tape.sub(sn, sp)?;
    let shifted = tape.affine(gap, 1.0, cfg.margin)?;
    Ok(tape.max0(shifted)?)
}

/// `-Σ_k [λ T_k log Y_k + (1 - T_k) log(1 - Y_k)]` with `Y` clipped first.
pub fn weighted_bce(tape: &mut Tape, y: Var, target: &[f64], cfg: &JointLossConfig) -> Result<Var> {
    weighted_bce_with(tape, y, target, cfg.lambda_pos, cfg.clip_eps)
}

/// Weighted BCE with an explicit positive weight; `1.0` is plain BCE.
pub fn weighted_bce_with(tape: &mut Tape, y: Var, target: &[f64], lambda_pos: f64, clip_eps: f64) -> Result<Var> {
    if let Some(bad) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(DmanError::Input(format!("BCE target must be binary, found {bad}")));
    }
    let shape = tape.shape(y).to_vec();
    if shape.iter().product::<usize>() != target.len() {
        return Err(DmanError::Input(format!(
            "BCE target has {} entries, prediction shape {:?}",
            target.len(),
            shape
        )));
    }
    let clipped = tape.clamp(y, clip_eps, 1.0 - clip_eps)?;
    let log_y = tape.log(clipped)?;
    let one_minus = tape.affine(clipped, -1.0, 1.0)?;
    let log_1my = tape.log(one_minus)?;
    let pos_w = tape.constant(Tensor::new(shape.clone(), target.iter().map(|t| -lambda_pos * t).collect())?);
    let neg_w = tape.constant(Tensor::new(shape, target.iter().map(|t| -(1.0 - t)).collect())?);
    let a = tape.mul(log_y, pos_w)?;
    let b = tape.mul(log_1my, neg_w)?;
    let s = tape.add(a, b)?;
    Ok(tape.sum(s)?)
}

/// Embedding handles of one triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletVars {
    pub anchor: Var,
    pub positive: Var,
    pub negative: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub hinge: Var,
    pub bce: Var,
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Hinge term over `triplets` plus `beta` times the BCE over `(Y, T)` pairs.
pub fn joint_loss(
    tape: &mut Tape,
    triplets: &[TripletVars],
    pairs: &[(Var, &[f64])],
    triplet_cfg: &TripletLossConfig,
    joint_cfg: &JointLossConfig,
) -> Result<JointLoss> {
    if triplets.is_empty() && pairs.is_empty() {
        return Err(DmanError::Input("joint loss over an empty batch".into()));
    }
    let mut hinge_terms = Vec::with_capacity(triplets.len());
    match triplet_cfg.reduction {
        TripletReduction::Sum => {
            for t in triplets {
                hinge_terms.push(hinge_triplet_loss(tape, t.anchor, t.positive, t.negative, triplet_cfg)?);
            }
        }
        TripletReduction::MeanPerAnchor => {
            let mut anchors: Vec<Var> = triplets.iter().map(|t| t.anchor).collect();
            anchors.sort_unstable();
            anchors.dedup();
            for a in anchors {
                let mut group = Vec::new();
                for t in triplets.iter().filter(|t| t.anchor == a) {
                    group.push(hinge_triplet_loss(tape, t.anchor, t.positive, t.negative, triplet_cfg)?);
                }
                let s = sum_scalars(tape, &group)?;
                hinge_terms.push(tape.scale(s, 1.0 / group.len() as f64)?);
            }
        }
    }
    let hinge = sum_scalars(tape, &hinge_terms)?;

    let mut bce_terms = Vec::with_capacity(pairs.len());
    for (y, t) in pairs {
        bce_terms.push(weighted_bce(tape, *y, t, joint_cfg)?);
    }
    let bce = sum_scalars(tape, &bce_terms)?;
    let weighted = tape.scale(bce, joint_cfg.beta)?;
    let total = tape.add(hinge, weighted)?;
    Ok(JointLoss { total, hinge, bce })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn similarity_examples() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[3.0, 4.0]);
        let b = vec_var(&mut tape, &[3.0, 4.0]);
        let s = similarity(&mut tape, a, b, SimilarityKind::PaperSumNorm).unwrap();
        assert_eq!(tape.value(s).item(), 2.5);
        let c = similarity(&mut tape, a, b, SimilarityKind::Cosine).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-15);

        let o = vec_var(&mut tape, &[-4.0, 3.0]);
        for kind in [SimilarityKind::PaperSumNorm, SimilarityKind::Cosine] {
            let s = similarity(&mut tape, a, o, kind).unwrap();
            assert_eq!(tape.value(s).item(), 0.0);
        }
    }

    #[test]
    fn similarity_degenerate_inputs() {
        let mut tape = Tape::new();
        let z = vec_var(&mut tape, &[0.0, 0.0]);
        let a = vec_var(&mut tape, &[1.0, 0.0]);
        assert!(matches!(
            similarity(&mut tape, z, z, SimilarityKind::PaperSumNorm),
            Err(DmanError::Degenerate(_))
        ));
        let s = similarity(&mut tape, z, a, SimilarityKind::PaperSumNorm).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
        assert!(matches!(
            similarity(&mut tape, z, a, SimilarityKind::Cosine),
            Err(DmanError::Degenerate(_))
        ));
    }

    /// Builds vectors with prescribed paper-similarities to an anchor `(1, 0)`:
    /// `b = (x, 0)` gives `x / (1 + x)`.
    fn with_sim(tape: &mut Tape, target: f64) -> Var {
        vec_var(tape, &[target / (1.0 - target), 0.0])
    }

    #[test]
    fn hinge_examples() {
        let cfg = TripletLossConfig::default();
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 0.0]);
        let p = with_sim(&mut tape, 0.9);
        let n = with_sim(&mut tape, 0.2);
        let l = hinge_triplet_loss(&mut tape, a, p, n, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        for v in [a, p, n] {
            assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 0.0));
        }

        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 0.0]);
        let p = with_sim(&mut tape, 0.4);
        let n = with_sim(&mut tape, 0.4);
        let l = hinge_triplet_loss(&mut tape, a, p, n, &cfg).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bce_hand_value() {
        let cfg = JointLossConfig::default();
        let mut tape = Tape::new();
        let y = vec_var(&mut tape, &[0.5, 0.5]);
        let l = weighted_bce(&mut tape, y, &[1.0, 0.0], &cfg).unwrap();
        assert!((tape.value(l).item() - 11.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 7.6246).abs() < 1e-4);
    }

    #[test]
    fn bce_vanishes_at_perfect_prediction() {
        let cfg = JointLossConfig::default();
        let mut tape = Tape::new();
        let y = vec_var(&mut tape, &[1.0, 0.0, 1.0]);
        let l = weighted_bce(&mut tape, y, &[1.0, 0.0, 1.0], &cfg).unwrap();
        assert!(tape.value(l).item() < 1e-5);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let cfg = JointLossConfig::default();
        let mut tape = Tape::new();
        let y = vec_var(&mut tape, &[0.5]);
        assert!(matches!(weighted_bce(&mut tape, y, &[0.5], &cfg), Err(DmanError::Input(_))));
    }

    #[test]
    fn joint_with_zero_beta_is_hinge() {
        let tcfg = TripletLossConfig::default();
        let jcfg = JointLossConfig { beta: 0.0, ..Default::default() };
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[0.2, 0.7]);
        let p = vec_var(&mut tape, &[0.3, 0.1]);
        let n = vec_var(&mut tape, &[0.9, 0.4]);
        let t = TripletVars { anchor: a, positive: p, negative: n };
        let target = [1.0, 0.0];
        let j = joint_loss(&mut tape, &[t], &[(a, &target)], &tcfg, &jcfg).unwrap();
        assert_eq!(tape.value(j.total).item(), tape.value(j.hinge).item());
        assert!(tape.value(j.bce).item() > 0.0);
    }

    #[test]
    fn joint_rejects_empty_batch() {
        let mut tape = Tape::new();
        assert!(joint_loss(
            &mut tape,
            &[],
            &[],
            &TripletLossConfig::default(),
            &JointLossConfig::default()
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TripletLossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(JointLossConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(JointLossConfig { clip_eps: 0.5, ..Default::default() }.validate().is_err());
        assert!(JointLossConfig { lambda_pos: 0.0, ..Default::default() }.validate().is_err());
    }
}

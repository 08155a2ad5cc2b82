//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to audit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_graph, sample_triplets, MultimodalGraph, MultimodalNode, DEFAULT_MAX_LINKS};
use crate::losses::{JointLossConfig, SimilarityKind, TripletLossConfig, TripletReduction};
use crate::model::{DmanModel, EmbeddingKind, ModelConfig, ModelVars};
use crate::optim::Parameterized;
use crate::regions::RegionFeatures;
use crate::tensor::{Reduction, Tape, Tensor, TensorError, Var};
use crate::trainer::{batch_objective, BatchReduction};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Points whose rectifier or clip inputs sit this close to a kink are skipped.
    pub kink: f64,
    /// Denominator floor for the relative error, per unit of `max(1, |f(x)|)`.
    /// Central-difference roundoff grows with the size of `f`, so gradients
    /// far below that noise are judged against the floor instead.
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink: 1e-6,
            floor: 2e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements skipped because the step crossed or touched a kink.
    pub skipped: usize,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F, E>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<bool>, f64), E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let (pattern, margin) = tape.kink_pattern();
    Ok((tape.value(out).item(), pattern, margin))
}

/// Compares `backward` of the scalar built by `f` against central
/// differences, perturbing every element of every input.
pub fn check_gradients<F, E>(inputs: &[Tensor], tol: Tolerance, f: F) -> Result<GradReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let (base_pattern, base_margin) = tape.kink_pattern();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let floor = tol.floor * tape.value(out).item().abs().max(1.0);
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let orig = probe[ti].data()[e];
            probe[ti].data_mut()[e] = orig + tol.step;
            let (plus, p_pat, p_margin) = evaluate(&probe, &f)?;
            probe[ti].data_mut()[e] = orig - tol.step;
            let (minus, m_pat, m_margin) = evaluate(&probe, &f)?;
            probe[ti].data_mut()[e] = orig;

            let near_kink = base_margin < tol.kink || p_margin < tol.kink || m_margin < tol.kink;
            if near_kink || p_pat != base_pattern || m_pat != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * tol.step);
            let a = grad.data()[e];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ti, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Name and result of one check in [`gradient_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("length matches shape")
}

/// `Σ c ⊙ v` with fixed random `c`, so every output element matters.
fn weigh(tape: &mut Tape, v: Var, salt: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let c = random_tensor(&mut rng, tape.shape(v), -1.0, 1.0);
    let c = tape.constant(c);
    let p = tape.mul(v, c)?;
    tape.sum(p)
}

type OpCheck = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;
/// Input shape and the range its entries are drawn from.
type InputSpec = (Vec<usize>, f64, f64);

fn op_checks() -> Vec<(&'static str, Vec<InputSpec>, OpCheck)> {
    vec![
        ("matmul", vec![(vec![3, 4], -1.0, 1.0), (vec![4, 2], -1.0, 1.0)], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weigh(t, o, 1)
        }),
        ("transpose", vec![(vec![3, 2], -1.0, 1.0)], |t, v| {
            let o = t.transpose(v[0])?;
            weigh(t, o, 2)
        }),
        ("reshape", vec![(vec![2, 3], -1.0, 1.0)], |t, v| {
            let o = t.reshape(v[0], vec![3, 2])?;
            weigh(t, o, 3)
        }),
        ("add_broadcast", vec![(vec![3, 4], -1.0, 1.0), (vec![3, 1], -1.0, 1.0)], |t, v| {
            let o = t.add(v[0], v[1])?;
            weigh(t, o, 4)
        }),
        ("sub_broadcast_lhs", vec![(vec![3, 1], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)], |t, v| {
            let o = t.sub(v[0], v[1])?;
            weigh(t, o, 5)
        }),
        ("mul", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |t, v| {
            let o = t.mul(v[0], v[1])?;
            weigh(t, o, 6)
        }),
        ("div", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 1], 0.5, 2.0)], |t, v| {
            let o = t.div(v[0], v[1])?;
            weigh(t, o, 7)
        }),
        ("tanh", vec![(vec![5], -2.0, 2.0)], |t, v| {
            let o = t.tanh(v[0])?;
            weigh(t, o, 8)
        }),
        ("sigmoid", vec![(vec![5], -3.0, 3.0)], |t, v| {
            let o = t.sigmoid(v[0])?;
            weigh(t, o, 9)
        }),
        ("log", vec![(vec![5], 0.2, 3.0)], |t, v| {
            let o = t.log(v[0])?;
            weigh(t, o, 10)
        }),
        ("max0", vec![(vec![6], -1.0, 1.0)], |t, v| {
            let o = t.max0(v[0])?;
            weigh(t, o, 11)
        }),
        ("affine", vec![(vec![4], -1.0, 1.0)], |t, v| {
            let o = t.affine(v[0], -1.5, 0.25)?;
            weigh(t, o, 12)
        }),
        ("scale", vec![(vec![4], -1.0, 1.0)], |t, v| {
            let o = t.scale(v[0], 3.0)?;
            weigh(t, o, 13)
        }),
        ("clamp", vec![(vec![6], -1.0, 1.0)], |t, v| {
            let o = t.clamp(v[0], -0.5, 0.5)?;
            weigh(t, o, 14)
        }),
        ("softmax_rows", vec![(vec![3, 4], -2.0, 2.0)], |t, v| {
            let o = t.softmax(v[0], 1)?;
            weigh(t, o, 15)
        }),
        ("softmax_columns", vec![(vec![3, 4], -2.0, 2.0)], |t, v| {
            let o = t.softmax(v[0], 0)?;
            weigh(t, o, 16)
        }),
        ("sum_axis", vec![(vec![3, 4], -1.0, 1.0)], |t, v| {
            let o = t.reduce(v[0], Reduction::Sum, Some(0))?;
            weigh(t, o, 17)
        }),
        ("mean_axis", vec![(vec![3, 4], -1.0, 1.0)], |t, v| {
            let o = t.reduce(v[0], Reduction::Mean, Some(1))?;
            weigh(t, o, 18)
        }),
        ("mean_all", vec![(vec![3, 4], -1.0, 1.0)], |t, v| {
            let o = t.mul(v[0], v[0])?;
            t.mean(o)
        }),
        ("dot", vec![(vec![5], -1.0, 1.0), (vec![5], -1.0, 1.0)], |t, v| t.dot(v[0], v[1])),
        ("norm", vec![(vec![5], -1.0, 1.0)], |t, v| t.norm(v[0])),
        (
            "local_linear",
            vec![(vec![3, 4], -1.0, 1.0), (vec![3, 2, 4], -1.0, 1.0), (vec![3, 2], -1.0, 1.0)],
            |t, v| {
                let o = t.local_linear(v[0], v[1], v[2])?;
                weigh(t, o, 19)
            },
        ),
        ("similarity", vec![(vec![5], 0.0, 1.0), (vec![5], 0.0, 1.0)], |t, v| {
            let (d, na, nb) = t.dot_and_norm(v[0], v[1])?;
            let den = t.add(na, nb)?;
            t.div(d, den)
        }),
    ]
}

/// Four nodes, two labels of two nodes each, `L = 6`, `D = 3`, `M_feat = 4`.
pub fn toy_graph(seed: u64) -> crate::Result<MultimodalGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..4)
        .map(|i| {
            let topic = i / 2;
            let regions = RegionFeatures::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let words = vec![3 * topic, 3 * topic + 1 + i % 2];
            MultimodalNode::new(i, regions, words, 6, vec![topic])
        })
        .collect::<crate::Result<Vec<_>>>()?;
    build_graph(nodes, DEFAULT_MAX_LINKS, seed)
}

fn joint_check(
    model: &DmanModel,
    graph: &MultimodalGraph,
    tcfg: &TripletLossConfig,
    jcfg: &JointLossConfig,
    reduction: BatchReduction,
    seed: u64,
    tol: Tolerance,
) -> crate::Result<GradReport> {
    let batch: Vec<usize> = (0..graph.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = sample_triplets(graph, &batch, 3, &mut rng)?;
    let inputs: Vec<Tensor> = model.blocks().iter().map(|(_, t)| (*t).clone()).collect();
    check_gradients(&inputs, tol, |tape, v| {
        let vars = ModelVars::from_blocks(tape, v)?;
        // same dropout masks on every evaluation
        let mut masks = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let loss = batch_objective(
            tape,
            &vars,
            &model.config,
            graph,
            &batch,
            &sampled.triplets,
            tcfg,
            jcfg,
            reduction,
            &mut masks,
        )?;
        Ok(loss.total)
    })
}

/// Finite-difference audit of every tape op and of the full joint
/// objective on [`toy_graph`].
pub fn gradient_suite(seed: u64, tol: Tolerance) -> crate::Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, specs, f) in op_checks() {
        let inputs: Vec<Tensor> = specs.iter().map(|(s, lo, hi)| random_tensor(&mut rng, s, *lo, *hi)).collect();
        let report = check_gradients(&inputs, tol, f)?;
        out.push(SuiteEntry { name: name.into(), report });
    }
    let graph = toy_graph(seed)?;
    let model = DmanModel::new(ModelConfig::new(6, 3, 4), seed)?;
    let report = joint_check(&model, &graph, &TripletLossConfig::default(), &JointLossConfig::default(), BatchReduction::Mean, seed, tol)?;
    out.push(SuiteEntry { name: "joint_objective".into(), report });

    let mut small = ModelConfig::new(6, 3, 4);
    small.hidden = [8, 4];
    small.embedding = EmbeddingKind::Logits;
    let model = DmanModel::new(small, seed + 1)?;
    let tcfg = TripletLossConfig {
        similarity: SimilarityKind::Cosine,
        reduction: TripletReduction::MeanPerAnchor,
        ..Default::default()
    };
    let report = joint_check(&model, &graph, &tcfg, &JointLossConfig::default(), BatchReduction::Sum, seed + 1, tol)?;
    out.push(SuiteEntry { name: "joint_objective_cosine_logits".into(), report });
    Ok(out)
}

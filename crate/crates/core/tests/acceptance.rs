//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dman::config::RunConfig;
use dman::eval::{
    average_precision, classify_metrics, cross_modal_search, mean_average_precision, EmbeddingSet, QueryVector,
};
use dman::gradcheck::{gradient_suite, Tolerance};
use dman::graph::{build_graph, MultimodalNode};
use dman::model::{attend, attention_scores, attention_weights, DmanModel, ModelConfig};
use dman::optim::Parameterized;
use dman::pipeline;
use dman::regions::RegionFeatures;
use dman::synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use dman::tensor::{Tape, Tensor};
use dman::trainer::{complexity_probe, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1 ------------------------------------------------------------------------

fn gradient_criterion() -> Outcome {
    let start = Instant::now();
    let entries = gradient_suite(7, Tolerance::default()).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .unwrap();
    let checked: usize = entries.iter().map(|e| e.report.checked).sum();
    let skipped: usize = entries.iter().map(|e| e.report.skipped).sum();
    let all_checked = entries.iter().all(|e| e.report.checked > 0);
    outcome(
        worst.report.max_rel_err <= 1e-4 && secs < 60.0 && all_checked,
        format!(
            "{} checks, {checked} elements ({skipped} kink-skipped), worst {} rel err {:.2e}, {secs:.1}s",
            entries.len(),
            worst.name,
            worst.report.max_rel_err
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let n = rng.random_range(1..=10);
    let c = rng.random_range(1..=4);
    // coarse scores so ties and exact-threshold values occur
    let scores = (0..n)
        .map(|_| (0..c).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect())
        .collect();
    let truth = (0..n).map(|_| (0..c).map(|_| rng.random_bool(0.4)).collect()).collect();
    (scores, truth)
}

/// Confusion counts per class by set enumeration.
fn oracle_prf(scores: &[Vec<f64>], truth: &[Vec<bool>], thr: f64) -> [f64; 6] {
    let c = truth[0].len();
    let mut counts = Vec::new();
    for k in 0..c {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i][k] > thr).collect();
        let actual: Vec<usize> = (0..scores.len()).filter(|&i| truth[i][k]).collect();
        let tp = predicted.iter().filter(|i| actual.contains(i)).count();
        counts.push((tp, predicted.len() - tp, actual.len() - tp));
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (tp, fp, fneg) = counts
        .iter()
        .fold((0, 0, 0), |acc, &(a, b, d)| (acc.0 + a, acc.1 + b, acc.2 + d));
    let (mp, mr) = (div(tp, tp + fp), div(tp, tp + fneg));
    let per: Vec<(f64, f64)> = counts.iter().map(|&(a, b, d)| (div(a, a + b), div(a, a + d))).collect();
    let cf = c as f64;
    [
        mp,
        mr,
        f(mp, mr),
        per.iter().map(|x| x.0).sum::<f64>() / cf,
        per.iter().map(|x| x.1).sum::<f64>() / cf,
        per.iter().map(|&(p, r)| f(p, r)).sum::<f64>() / cf,
    ]
}

/// AP straight from the definition: rank of item i is the number of items
/// ahead of it under (score desc, index asc).
fn oracle_map(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Option<f64> {
    let n = scores.len();
    let mut aps = Vec::new();
    for k in 0..truth[0].len() {
        let ahead = |i: usize, j: usize| scores[j][k] > scores[i][k] || (scores[j][k] == scores[i][k] && j < i);
        let rank = |i: usize| 1 + (0..n).filter(|&j| ahead(i, j)).count();
        let pos: Vec<usize> = (0..n).filter(|&i| truth[i][k]).collect();
        if pos.is_empty() {
            continue;
        }
        let ap = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let rel_above = pos.iter().filter(|&&j| rank(j) <= r).count();
                rel_above as f64 / r as f64
            })
            .sum::<f64>()
            / pos.len() as f64;
        aps.push(ap);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn oracle_pk(queries: &[(usize, usize)], vectors: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> f64 {
    let n = vectors.len();
    let mut total = 0.0;
    for &(label, word) in queries {
        let dist = |i: usize| {
            vectors[i]
                .iter()
                .enumerate()
                .map(|(d, v)| {
                    let q = if d == word { 1.0 } else { 0.0 };
                    (v - q) * (v - q)
                })
                .sum::<f64>()
                .sqrt()
        };
        let d: Vec<f64> = (0..n).map(dist).collect();
        let rank = |i: usize| (0..n).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count();
        let hits = (0..n).filter(|&i| rank(i) < k && labels[i].contains(&label)).count();
        total += hits as f64 / k as f64;
    }
    total / queries.len() as f64
}

fn oracle_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let (mut prf_n, mut map_n, mut pk_n) = (0, 0, 0);
    while prf_n < 150 || map_n < 150 || pk_n < 150 {
        let (scores, truth) = random_instance(&mut rng);
        let thr = [0.5, 0.3, 0.7][rng.random_range(0..3)];
        let got = classify_metrics(&scores, &truth, thr).unwrap();
        let want = oracle_prf(&scores, &truth, thr);
        let have = [
            got.micro_precision,
            got.micro_recall,
            got.micro_f1,
            got.macro_precision,
            got.macro_recall,
            got.macro_f1,
        ];
        for (a, b) in have.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
        prf_n += 1;

        if let Some(want) = oracle_map(&scores, &truth) {
            let got = mean_average_precision(&scores, &truth).unwrap().map;
            worst = worst.max((got - want).abs());
            map_n += 1;
        }

        // retrieval: embeddings in [0, 1]^L, coarse to force distance ties
        let n = scores.len();
        let l = rng.random_range(1..=5);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..l).map(|_| rng.random_range(0..=4) as f64 / 4.0).collect())
            .collect();
        let c = truth[0].len();
        let labels: Vec<Vec<usize>> = truth
            .iter()
            .map(|row| (0..c).filter(|&k| row[k]).collect())
            .collect();
        let queries: Vec<(usize, usize)> = (0..c)
            .filter(|&k| labels.iter().any(|s| s.contains(&k)))
            .map(|k| (k, rng.random_range(0..l)))
            .collect();
        if queries.is_empty() {
            continue;
        }
        let set = EmbeddingSet::new((0..n).collect(), vectors.clone(), labels.clone()).unwrap();
        let qv: Vec<QueryVector> = queries
            .iter()
            .map(|&(c, w)| QueryVector::new(c, Some(w), l).unwrap())
            .collect();
        let ks: Vec<usize> = (1..=n).collect();
        let got = cross_modal_search(&qv, &set, &ks).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            worst = worst.max((got.precision[i] - oracle_pk(&queries, &vectors, &labels, k)).abs());
        }
        pk_n += 1;
    }
    // single hand-checked ranking
    let ap = average_precision(&[true, false, true]).unwrap();
    worst = worst.max((ap - 0.8333333333333334).abs());
    outcome(
        worst <= 1e-12,
        format!("P/R/F1 x{prf_n}, mAP x{map_n}, p@k x{pk_n}; max deviation {worst:.1e}"),
    )
}

// 3 ------------------------------------------------------------------------

fn attention_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut sum_err, mut hull_viol, mut shift_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut locality_breaks = 0usize;
    for case in 0..1000 {
        let l = rng.random_range(2..=6);
        let d = rng.random_range(1..=6);
        let m = rng.random_range(1..=5);
        let mut cfg = ModelConfig::new(l, d, m);
        cfg.hidden = [rng.random_range(1..=6), rng.random_range(1..=4)];
        let model = DmanModel::new(cfg, case).unwrap();
        let scale = [0.1, 1.0, 10.0][case as usize % 3];
        let regions = RegionFeatures::new(
            d,
            m,
            (0..d * m).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false).unwrap();
        let r = tape.constant(regions.to_tensor());
        let scores = attention_scores(&mut tape, vars.attn_w, vars.attn_b, r).unwrap();
        let a = attention_weights(&mut tape, scores).unwrap();
        let u = attend(&mut tape, a, r).unwrap();
        let av = tape.value(a).clone();
        let uv = tape.value(u).clone();
        for k in 0..l {
            sum_err = sum_err.max((av.row(k).iter().sum::<f64>() - 1.0).abs());
            for c in 0..m {
                let col = (0..d).map(|j| regions.row(j)[c]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let x = uv.row(k)[c];
                hull_viol = hull_viol.max(lo - x).max(x - hi);
            }
        }
        // softmax shift invariance
        let shift = rng.random_range(-50.0..50.0);
        let sv = tape.value(scores).clone();
        let shifted = Tensor::new(sv.shape().to_vec(), sv.data().iter().map(|s| s + shift).collect()).unwrap();
        let sh = tape.constant(shifted);
        let a2 = attention_weights(&mut tape, sh).unwrap();
        for (x, y) in tape.value(a2).data().iter().zip(av.data()) {
            shift_err = shift_err.max((x - y).abs());
        }
        // perturbing word k's word-local weights leaves every other word alone
        let base = model.infer(&regions).unwrap().y;
        let k = rng.random_range(0..l);
        let mut bumped = model.clone();
        for (name, t) in bumped.blocks_mut() {
            if !name.starts_with("lfc.") {
                continue;
            }
            let per = t.len() / l;
            for v in &mut t.data_mut()[k * per..(k + 1) * per] {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let after = bumped.infer(&regions).unwrap().y;
        locality_breaks += (0..l).filter(|&j| j != k && after[j].to_bits() != base[j].to_bits()).count();
    }
    outcome(
        sum_err <= 1e-12 && hull_viol <= 1e-12 && shift_err <= 1e-12 && locality_breaks == 0,
        format!(
            "1000 inputs: row-sum err {sum_err:.1e}, hull violation {:.1e}, shift err {shift_err:.1e}, locality breaks {locality_breaks}",
            hull_viol.max(0.0)
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn planted_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        topics: 4,
        nodes_per_topic: 50,
        regions: 8,
        feat_dim: 16,
        vocab: 40,
        noise: 0.3,
        co_label_prob: 0.05,
        seed,
        ..Default::default()
    }
}

struct PlantedRun {
    p_at_5: f64,
    micro_f1: f64,
    map: f64,
    /// Per topic: mean attention on planted regions, per region.
    attention: Vec<f64>,
    seconds: f64,
}

fn planted_run(ds: &SyntheticDataset, spec: &SyntheticSpec, cfg: &RunConfig) -> PlantedRun {
    let start = Instant::now();
    let bundle = &ds.bundle;
    let (ck, _) = pipeline::train_bundle(bundle, cfg, None, |_, _| Ok(())).expect("training");
    let rows = pipeline::embed_bundle(bundle, &ck).expect("embedding");
    let search = pipeline::search(bundle, &rows, &[5]).expect("search");
    let cls = pipeline::classify(bundle, &rows, cfg).expect("classification");

    let mut attention = Vec::new();
    for p in 0..spec.topics {
        let (mut total, mut count) = (0.0, 0usize);
        for i in (0..bundle.manifest.n).filter(|&i| ds.topic[i] == p) {
            let inf = ck.model.infer(&bundle.region_features(i).unwrap()).unwrap();
            let planted = &ds.planted_regions[i];
            for w in spec.topic_words(p) {
                let row = inf.attention.row(w);
                total += planted.iter().map(|&j| row[j]).sum::<f64>() / planted.len() as f64;
                count += 1;
            }
        }
        attention.push(total / count as f64);
    }
    PlantedRun {
        p_at_5: search.precision[0],
        micro_f1: cls.metrics.micro_f1,
        map: cls.map.map,
        attention,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn planted_criterion() -> Outcome {
    let spec = planted_spec(11);
    let ds = generate_synthetic(&spec).unwrap();
    let cfg = RunConfig::default();
    let r = planted_run(&ds, &spec, &cfg);
    let baseline = 1.0 / spec.regions as f64;
    let att_ok = r.attention.iter().all(|&a| a >= 2.0 * baseline);
    let att: Vec<String> = r.attention.iter().map(|a| format!("{a:.3}")).collect();
    outcome(
        r.p_at_5 >= 0.8 && r.micro_f1 >= 0.85 && att_ok && r.seconds < 600.0,
        format!(
            "{} epochs: p@5 {:.3} (>= 0.8), micro-F1 {:.3} (>= 0.85), planted attention [{}] (>= {:.3}), {:.0}s",
            cfg.train.epochs,
            r.p_at_5,
            r.micro_f1,
            att.join(", "),
            2.0 * baseline,
            r.seconds
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablation_criterion() -> Outcome {
    let (mut full, mut hinge_only, mut flat_attention) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let spec = planted_spec(100 + seed);
        let ds = generate_synthetic(&spec).unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.data.split_seed = seed;
        full.push(planted_run(&ds, &spec, &cfg).map);
        let mut ablated = cfg.clone();
        ablated.joint.beta = 0.0;
        hinge_only.push(planted_run(&ds, &spec, &ablated).map);
        // no attention: every region averaged with equal weight
        let mut flat = ds.clone();
        flatten_regions(&mut flat, &spec);
        flat_attention.push(planted_run_no_attention(&flat, &cfg).unwrap_or(f64::NAN));
    }
    let (mf, mh, ma) = (median(full.clone()), median(hinge_only.clone()), median(flat_attention));
    outcome(
        mf >= mh,
        format!(
            "median mAP full {mf:.4} vs hinge-only {mh:.4}; no-attention {ma:.4} (gap {:+.4}, reported only)",
            mf - ma
        ),
    )
}

/// Replaces each node's regions with their mean, so attention has one
/// region to pick from.
fn flatten_regions(ds: &mut SyntheticDataset, spec: &SyntheticSpec) {
    let (d, m) = (spec.regions, spec.feat_dim);
    let old = ds.bundle.regions.take().unwrap();
    let mut new = Vec::with_capacity(old.len() / d);
    for node in old.chunks(d * m) {
        for c in 0..m {
            new.push((0..d).map(|j| node[j * m + c] as f64).sum::<f64>() as f32 / d as f32);
        }
    }
    ds.bundle.regions = Some(new);
    ds.bundle.manifest.d = 1;
}

fn planted_run_no_attention(ds: &SyntheticDataset, cfg: &RunConfig) -> Option<f64> {
    let (ck, _) = pipeline::train_bundle(&ds.bundle, cfg, None, |_, _| Ok(())).ok()?;
    let rows = pipeline::embed_bundle(&ds.bundle, &ck).ok()?;
    Some(pipeline::classify(&ds.bundle, &rows, cfg).ok()?.map.map)
}

// 6 ------------------------------------------------------------------------

fn complexity_criterion() -> Outcome {
    let sizes = [250, 500, 1000, 2000];
    let make = |n: usize| {
        let spec = SyntheticSpec {
            nodes_per_topic: n / 4,
            seed: n as u64,
            ..planted_spec(0)
        };
        let nodes = generate_synthetic(&spec)?.bundle.to_nodes()?;
        build_graph(nodes, 50, 0)
    };
    let cfg = TrainConfig { seed: 1, ..Default::default() };
    let model_cfg = ModelConfig::new(40, 8, 16);
    let probe = complexity_probe(&sizes, make, &model_cfg, &cfg, &Default::default(), &Default::default(), 3)
        .expect("probe runs");
    let rows: Vec<String> = probe
        .rows
        .iter()
        .map(|r| format!("N={} {:.3}s", r.nodes, r.seconds_per_epoch))
        .collect();
    outcome(
        (0.8..=1.3).contains(&probe.slope),
        format!("log-log slope {:.3} in [0.8, 1.3]; {}", probe.slope, rows.join(", ")),
    )
}

// 7 ------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dman"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn chain(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(dir.join("run.toml"), "[train]\nepochs = 15\n[classifier]\nepochs = 50\n").map_err(|e| e.to_string())?;
    run_cli(&["generate", "--out", &p("bundle"), "--seed", "5"])?;
    run_cli(&["train", "--bundle", &p("bundle"), "--config", &p("run.toml"), "--out", &p("model.ckpt"), "--seed", "5"])?;
    run_cli(&["embed", "--bundle", &p("bundle"), "--checkpoint", &p("model.ckpt"), "--out", &p("emb.tsv")])?;
    run_cli(&[
        "eval-classify",
        "--bundle",
        &p("bundle"),
        "--embeddings",
        &p("emb.tsv"),
        "--config",
        &p("run.toml"),
        "--out",
        &p("classify"),
        "--seed",
        "5",
    ])?;
    run_cli(&[
        "eval-search",
        "--bundle",
        &p("bundle"),
        "--embeddings",
        &p("emb.tsv"),
        "--k",
        "1,5,10",
        "--out",
        &p("search"),
    ])?;
    ["classify.tsv", "classify.kv", "search.tsv", "search.kv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism_criterion() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (chain(a.path()), chain(b.path())) {
        (Ok(x), Ok(y)) => {
            let bytes: usize = x.iter().map(Vec::len).sum();
            outcome(x == y, format!("4 metric files, {bytes} bytes, identical: {}", x == y))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("chain failed: {e}")),
    }
}

// 8 ------------------------------------------------------------------------

fn hinge_criterion() -> Outcome {
    let l = 10;
    let mut cfg = ModelConfig::new(l, 2, 1);
    cfg.hidden = [8, 8];
    // Saturated word-local layers: Y ≈ 1 when the region feature is
    // positive, ≈ 0 when negative, and ≈ 0 when dropout silences a layer.
    let h = cfg.hidden;
    let blocks = vec![
        Tensor::zeros(vec![l, 1]),
        Tensor::zeros(vec![l]),
        Tensor::full(vec![l, h[0], 1], 10.0),
        Tensor::zeros(vec![l, h[0]]),
        Tensor::full(vec![l, h[1], h[0]], 10.0),
        Tensor::zeros(vec![l, h[1]]),
        Tensor::full(vec![l, 1, h[1]], 10.0),
        Tensor::full(vec![l], -10.0),
    ];
    let mut model = DmanModel::from_blocks(cfg, blocks).unwrap();
    let node = |id: usize, x: f64, label: usize| {
        let r = RegionFeatures::new(2, 1, vec![x, x]).unwrap();
        MultimodalNode::new(id, r, vec![0], l, vec![label]).unwrap()
    };
    // anchor and positive share a label; the third node links to nothing
    let graph = build_graph(vec![node(0, 1.0, 0), node(1, 1.0, 0), node(2, -1.0, 1)], 50, 0).unwrap();
    let before: Vec<Vec<u64>> = model
        .blocks()
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let train = TrainConfig { batch_size: 3, seed: 3, ..Default::default() };
    let joint = dman::losses::JointLossConfig { beta: 0.0, ..Default::default() };
    let mut trainer = Trainer::new(&model, train, Default::default(), joint).unwrap();
    let stats = trainer.step(&graph, &mut model, &[0, 1, 2]).unwrap();
    let after: Vec<Vec<u64>> = model
        .blocks()
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let changed: usize = before
        .iter()
        .zip(&after)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
        .sum();
    outcome(
        stats.triplets == 2 && stats.hinge == 0.0 && changed == 0,
        format!(
            "{} triplets, hinge {}, {changed} of {} parameters changed",
            stats.triplets,
            stats.hinge,
            model.parameter_count()
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", gradient_criterion),
        (2, "metric oracles", oracle_criterion),
        (3, "attention invariants", attention_criterion),
        (4, "planted-structure recovery", planted_criterion),
        (5, "ablation ordering", ablation_criterion),
        (6, "complexity slope", complexity_criterion),
        (7, "pipeline determinism", determinism_criterion),
        (8, "hinge flat region", hinge_criterion),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("{} {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

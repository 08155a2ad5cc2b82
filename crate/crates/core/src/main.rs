use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dman::checkpoint::Checkpoint;
use dman::config::RunConfig;
use dman::data::{read_text, resolve_path, write_atomic, DatasetBundle};
use dman::eval::{metrics_kv, metrics_table, read_embeddings, write_embeddings, MetricRow};
use dman::gradcheck::{gradient_suite, Tolerance};
use dman::graph::build_graph;
use dman::pipeline;
use dman::synthetic::{generate_synthetic, SyntheticSpec};
use dman::trainer::complexity_probe;
use dman::DmanError;

#[derive(Debug, Parser)]
#[command(name = "dman", version, about = "Multimodal attention network embeddings on a link graph")]
struct Cli {
    /// Overrides the seed of whatever the subcommand randomizes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic planted-topic bundle.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// TOML with generator settings; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write the capped shared-label graph of the training split.
    BuildGraph {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss table; defaults to `<out>.report.tsv`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Continue from this checkpoint; its config and split are kept.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also save the checkpoint after every epoch.
        #[arg(long)]
        save_every_epoch: bool,
    },
    /// Eval-mode embeddings of every node.
    Embed {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Downstream classifier on train embeddings, scored on test.
    EvalClassify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        embeddings: PathBuf,
        /// Writes `<out>.tsv` and `<out>.kv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Label-query retrieval over test embeddings.
    EvalSearch {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Writes `<out>.tsv` and `<out>.kv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention rows for chosen nodes and words.
    ExportAttention {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<usize>,
        /// Word indices; all words when omitted.
        #[arg(long, value_delimiter = ',')]
        words: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the joint loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        max_rel_err: f64,
    },
    /// Seconds per epoch against graph size.
    BenchComplexity {
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Run configuration TOML; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(DmanError),
}

impl From<DmanError> for Failure {
    fn from(e: DmanError) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Resolves an input path and insists it exists.
fn input(p: &Path) -> CliResult<PathBuf> {
    let r = resolve_path(p);
    if r.exists() {
        Ok(r)
    } else {
        Err(Failure::Usage(format!("no such path: {}", r.display())))
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(&input(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.data.split_seed = s;
    }
    Ok(cfg)
}

fn load_bundle(p: &Path) -> CliResult<DatasetBundle> {
    Ok(DatasetBundle::load(&input(p)?)?)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_metrics(prefix: &Path, rows: &[MetricRow]) -> CliResult {
    let prefix = resolve_path(prefix);
    write_atomic(&with_suffix(&prefix, ".tsv"), metrics_table(rows).as_bytes())?;
    write_atomic(&with_suffix(&prefix, ".kv"), metrics_kv(rows).as_bytes())?;
    Ok(())
}

fn generate(out: &Path, spec: Option<&Path>, seed: Option<u64>) -> CliResult {
    let mut spec = match spec {
        Some(p) => {
            let p = input(p)?;
            toml::from_str::<SyntheticSpec>(&read_text(&p)?)
                .map_err(|e| DmanError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    ds.bundle.save(&resolve_path(out))?;
    log::info!("wrote {} nodes to {}", ds.bundle.manifest.n, out.display());
    Ok(())
}

fn build_graph_cmd(run: &RunArgs, out: &Path, seed: Option<u64>) -> CliResult {
    let bundle = load_bundle(&run.bundle)?;
    let cfg = load_config(run.config.as_deref(), seed)?;
    let nodes = pipeline::load_nodes(&bundle, &cfg)?;
    let (train, _) = pipeline::split(&bundle, &cfg);
    let g = pipeline::training_graph(&nodes, &train, &cfg)?;
    let mut s = String::from("node\tneighbors\n");
    for (i, nb) in g.adjacency().iter().enumerate() {
        let ids: Vec<String> = nb.iter().map(|&j| train[j].to_string()).collect();
        let _ = writeln!(s, "{}\t{}", train[i], ids.join(","));
    }
    write_atomic(&resolve_path(out), s.as_bytes())?;
    log::info!("{} nodes, {} edges", g.len(), g.edge_count());
    Ok(())
}

fn train_cmd(
    run: &RunArgs,
    out: &Path,
    report: Option<&Path>,
    resume: Option<&Path>,
    every_epoch: bool,
    seed: Option<u64>,
) -> CliResult {
    let bundle = load_bundle(&run.bundle)?;
    let resume = resume.map(|p| input(p).and_then(|p| Ok(Checkpoint::load(&p)?))).transpose()?;
    let mut cfg = load_config(run.config.as_deref(), seed)?;
    if let Some(ck) = &resume {
        // the split is frozen in the checkpoint; only the epoch budget may move
        let epochs = cfg.train.epochs;
        cfg = ck.run.clone();
        cfg.train.epochs = epochs;
    }
    let out = resolve_path(out);
    let (ck, rep) = pipeline::train_bundle(&bundle, &cfg, resume, |ck, s| {
        log::info!(
            "epoch {} joint {:.6} hinge {:.6} bce {:.6} ({:.2}s)",
            s.epoch,
            s.joint,
            s.hinge,
            s.bce,
            s.seconds
        );
        if every_epoch {
            ck.save(&out)?;
        }
        Ok(())
    })?;
    ck.save(&out)?;
    let report = report.map(resolve_path).unwrap_or_else(|| with_suffix(&out, ".report.tsv"));
    write_atomic(&report, rep.to_table().as_bytes())?;
    Ok(())
}

fn embed(bundle: &Path, checkpoint: &Path, out: &Path) -> CliResult {
    let bundle = load_bundle(bundle)?;
    let ck = Checkpoint::load(&input(checkpoint)?)?;
    let rows = pipeline::embed_bundle(&bundle, &ck)?;
    write_embeddings(&resolve_path(out), &rows)?;
    Ok(())
}

fn eval_classify(run: &RunArgs, embeddings: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let bundle = load_bundle(&run.bundle)?;
    let cfg = load_config(run.config.as_deref(), seed)?;
    let rows = read_embeddings(&input(embeddings)?)?;
    let o = pipeline::classify(&bundle, &rows, &cfg)?;
    write_metrics(out, &[MetricRow::classification("dman", &o)])
}

fn eval_search(bundle: &Path, embeddings: &Path, ks: &[usize], out: &Path) -> CliResult {
    let bundle = load_bundle(bundle)?;
    let rows = read_embeddings(&input(embeddings)?)?;
    let r = pipeline::search(&bundle, &rows, ks)?;
    write_metrics(out, &[MetricRow::search("dman", &r)])
}

fn export_attention(bundle: &Path, checkpoint: &Path, nodes: &[usize], words: &[usize], out: &Path) -> CliResult {
    let bundle = load_bundle(bundle)?;
    let ck = Checkpoint::load(&input(checkpoint)?)?;
    let all = pipeline::load_nodes(&bundle, &ck.run)?;
    let l = bundle.manifest.l;
    let words: Vec<usize> = if words.is_empty() { (0..l).collect() } else { words.to_vec() };
    if let Some(w) = words.iter().find(|&&w| w >= l) {
        return Err(DmanError::Input(format!("word {w} out of range (L={l})")).into());
    }
    let mut s = String::new();
    for &id in nodes {
        let node = all
            .get(id)
            .ok_or_else(|| DmanError::Input(format!("node {id} out of range (N={})", all.len())))?;
        let inf = ck.model.infer(&node.regions)?;
        let d = node.regions.regions();
        let list: Vec<String> = words.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "# node={id} L={l} D={d} words={}", list.join(","));
        for &w in &words {
            let row = &inf.attention.data()[w * d..(w + 1) * d];
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{w}\t{}", cells.join("\t"));
        }
    }
    write_atomic(&resolve_path(out), s.as_bytes())?;
    Ok(())
}

fn gradcheck(max_rel_err: f64, seed: Option<u64>) -> CliResult<bool> {
    let suite = gradient_suite(seed.unwrap_or(0), Tolerance::default())?;
    let mut ok = true;
    for e in &suite {
        let pass = e.report.max_rel_err <= max_rel_err;
        ok &= pass;
        println!(
            "{}\t{}\tmax_rel_err={:.3e}\tchecked={}\tskipped={}",
            if pass { "ok" } else { "FAIL" },
            e.name,
            e.report.max_rel_err,
            e.report.checked,
            e.report.skipped
        );
    }
    Ok(ok)
}

fn bench_complexity(sizes: &[usize], repeats: usize, out: Option<&Path>, seed: Option<u64>) -> CliResult {
    let seed = seed.unwrap_or(0);
    let base = SyntheticSpec::default();
    let make = |n: usize| {
        let spec = SyntheticSpec {
            nodes_per_topic: n.div_ceil(base.topics),
            seed: seed.wrapping_add(n as u64),
            ..base.clone()
        };
        let nodes = generate_synthetic(&spec)?.bundle.to_nodes()?;
        build_graph(nodes, RunConfig::default().graph.max_links, seed)
    };
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    let model_cfg = cfg.model.model_config(base.vocab, base.regions, base.feat_dim);
    let probe = complexity_probe(sizes, make, &model_cfg, &cfg.train, &cfg.triplet, &cfg.joint, repeats)?;
    let table = probe.to_table();
    match out {
        Some(p) => write_atomic(&resolve_path(p), table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<bool> {
    let seed = cli.seed;
    match &cli.command {
        Command::Generate { out, spec } => generate(out, spec.as_deref(), seed)?,
        Command::BuildGraph { run, out } => build_graph_cmd(run, out, seed)?,
        Command::Train {
            run,
            out,
            report,
            resume,
            save_every_epoch,
        } => train_cmd(run, out, report.as_deref(), resume.as_deref(), *save_every_epoch, seed)?,
        Command::Embed { bundle, checkpoint, out } => embed(bundle, checkpoint, out)?,
        Command::EvalClassify { run, embeddings, out } => eval_classify(run, embeddings, out, seed)?,
        Command::EvalSearch {
            bundle,
            embeddings,
            k,
            out,
        } => eval_search(bundle, embeddings, k, out)?,
        Command::ExportAttention {
            bundle,
            checkpoint,
            nodes,
            words,
            out,
        } => export_attention(bundle, checkpoint, nodes, words, out)?,
        Command::Gradcheck { max_rel_err } => return gradcheck(*max_rel_err, seed),
        Command::BenchComplexity { sizes, repeats, out } => bench_complexity(sizes, *repeats, out.as_deref(), seed)?,
    }
    Ok(true)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error kind=usage msg={}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use irag_core::ablate::{run_grid, train_kv_codec, AblationInput, Grid};
use irag_core::checkpoint::load_checkpoint;
use irag_core::data::{read_jsonl, synth_data, Corpus, CorpusRecord, QaRecord, SynthData, Task, TaskMix};
use irag_core::eval::{predict, EvalReport, MAX_ANSWER_TOKENS};
use irag_core::trainer::{build_flat_index, prompt_tokens, train, TrainConfig, TrainData};
use irag_core::{CoreError, DistillationTemperatures, EncodingStrategy, FrozenMode, KvCompression, Model, ModelConfig};
use irag_index::persist::{load_index, save_index};
use irag_index::server::{bind_address, serve, ServiceState, ADDR_ENV, DEFAULT_PORT, PORT_ENV};
use irag_index::{AnnIndex, ClientOptions, IndexClient, PqCodebook, PqIndex, PqTrainOptions, SearchBackend};

use settings::{usage, Settings, Usage};

#[derive(Parser)]
#[command(name = "irag", version, about = "Retrieval-in-the-model workbench")]
struct Cli {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true, env = "IRAG_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, train/eval splits, filler text and vocabulary.
    SynthData(SynthArgs),
    /// Train a model; writes per-epoch checkpoints and metrics.jsonl.
    Train(TrainCmd),
    /// Embed the corpus with a checkpoint and save a flat or PQ index.
    BuildIndex(BuildIndexArgs),
    /// Serve an index over TCP until interrupted.
    ServeIndex(ServeArgs),
    /// Answer one query.
    Infer(InferArgs),
    /// Exact match and recall@k over an examples file.
    Eval(EvalArgs),
    /// Train and evaluate every arm of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_passages: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Eval examples per eval task.
    #[arg(long)]
    n_eval: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    boundary_b: Option<usize>,
    #[arg(long)]
    boundary_t: Option<usize>,
    /// Passages retrieved per query.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    share_layer_b: Option<bool>,
    #[arg(long)]
    encoding: Option<String>,
    #[arg(long)]
    frozen: Option<String>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_t: Option<f64>,
    #[arg(long)]
    tau_r: Option<f64>,
    #[arg(long)]
    n_hard: Option<usize>,
    #[arg(long)]
    filler_prob: Option<f64>,
    /// Gradient-norm limit; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    dev_size: Option<usize>,
}

#[derive(Args)]
struct TrainCmd {
    /// Directory written by `synth-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// flat or pq.
    #[arg(long)]
    index_kind: Option<String>,
    #[arg(long)]
    pq_m: Option<usize>,
    #[arg(long)]
    pq_bits: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, env = ADDR_ENV)]
    host: Option<String>,
    #[arg(long, env = PORT_ENV)]
    port: Option<u16>,
    #[arg(long)]
    max_connections: Option<usize>,
    /// Reject `add` requests.
    #[arg(long)]
    read_only: bool,
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Local index file.
    #[arg(long, conflicts_with = "remote")]
    index: Option<PathBuf>,
    /// host:port of a running `serve-index`.
    #[arg(long)]
    remote: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// none, heavy_hitter or pq.
    #[arg(long)]
    compression: Option<String>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long)]
    query: String,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Examples file; defaults to eval.jsonl in the data directory.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-example predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// boundaries, objectives, encoding, frozen, compression or all.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Eval examples per task scored for each arm.
    #[arg(long)]
    n_eval: Option<usize>,
    /// Write the JSON reports here (one per grid).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Usage>().is_some()
            || matches!(
                c.downcast_ref::<CoreError>(),
                Some(CoreError::Config(_) | CoreError::Invalid(_) | CoreError::Data { .. })
            )
    })
}

fn run(cli: Cli) -> Result<()> {
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth_cmd(&s, a),
        Command::Train(a) => train_cmd(&s, a),
        Command::BuildIndex(a) => build_index_cmd(&s, a),
        Command::ServeIndex(a) => serve_cmd(&s, a),
        Command::Infer(a) => infer_cmd(&s, a),
        Command::Eval(a) => eval_cmd(&s, a),
        Command::Ablate(a) => ablate_cmd(&s, a),
    }
}

fn synth_cmd(s: &Settings, a: SynthArgs) -> Result<()> {
    let seed = s.pick(a.seed, "seed", 1)?;
    let n_passages = s.pick(a.n_passages, "n_passages", 256)?;
    let n_train = s.pick(a.n_train, "n_train", 2048)?;
    let n_eval = s.pick(a.n_eval, "n_eval", 512)?;
    let data = synth_data(seed, n_passages, n_train, n_eval, &TaskMix::default())?;
    data.write(&a.out)?;
    println!(
        "wrote {} passages, {} train, {} eval, {} filler, vocab {} to {}",
        data.corpus.len(),
        data.train.len(),
        data.eval.len(),
        data.filler.len(),
        data.tokenizer().vocab_size(),
        a.out.display()
    );
    Ok(())
}

fn model_config(s: &Settings, a: &ModelArgs, vocab_size: usize) -> Result<ModelConfig> {
    let preset: String = s.pick(a.preset.clone(), "preset", "tiny".into())?;
    let mut cfg = ModelConfig::preset(&preset, vocab_size)?;
    if cfg.vocab_size != vocab_size {
        return usage(format!("preset {preset:?} is shape-only and cannot be trained here"));
    }
    cfg.boundary_b = s.pick(a.boundary_b, "boundary_b", cfg.boundary_b)?;
    cfg.boundary_t = s.pick(a.boundary_t, "boundary_t", cfg.boundary_t)?;
    cfg.retrieval_fanin = s.pick(a.k, "k", cfg.retrieval_fanin)?;
    cfg.share_layer_b_cross_attention = s.pick(a.share_layer_b, "share_layer_b", cfg.share_layer_b_cross_attention)?;
    if let Some(e) = s.pick_opt(a.encoding.clone(), "encoding")? {
        cfg.encoding = EncodingStrategy::parse(&e)?;
    }
    if let Some(f) = s.pick_opt(a.frozen.clone(), "frozen")? {
        cfg.frozen = FrozenMode::parse(&f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings, a: &ScheduleArgs, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mut tc = d.clone();
    tc.schedule.total_epochs = s.pick(a.epochs, "epochs", d.schedule.total_epochs)?;
    tc.schedule.warmup_epochs = s.pick(a.warmup_epochs, "warmup_epochs", d.schedule.warmup_epochs)?;
    tc.schedule.batch_size = s.pick(a.batch_size, "batch_size", d.schedule.batch_size)?;
    tc.schedule.learning_rate = s.pick(a.learning_rate, "learning_rate", d.schedule.learning_rate)?;
    tc.schedule.seed = seed;
    tc.lambda = s.pick(a.lambda, "lambda", d.lambda)?;
    tc.temperatures = DistillationTemperatures::new(
        s.pick(a.tau_t, "tau_t", d.temperatures.tau_t)?,
        s.pick(a.tau_r, "tau_r", d.temperatures.tau_r)?,
    )?;
    tc.n_hard = s.pick(a.n_hard, "n_hard", d.n_hard)?;
    tc.filler_prob = s.pick(a.filler_prob, "filler_prob", d.filler_prob)?;
    if !(0.0..=1.0).contains(&tc.filler_prob) {
        return usage(format!("filler_prob must lie in [0, 1], got {}", tc.filler_prob));
    }
    if !(tc.lambda >= 0.0 && tc.lambda.is_finite()) {
        return usage(format!("lambda must be finite and non-negative, got {}", tc.lambda));
    }
    let clip = s.pick(a.grad_clip, "grad_clip", d.grad_clip.unwrap_or(0.0))?;
    tc.grad_clip = (clip > 0.0).then_some(clip);
    tc.dev_size = s.pick(a.dev_size, "dev_size", d.dev_size)?;
    tc.schedule.validate()?;
    Ok(tc)
}

fn dev_examples(data: &SynthData) -> Vec<QaRecord> {
    data.eval.iter().filter(|e| e.task == Task::Lookup.name()).cloned().collect()
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(s: &Settings, a: TrainCmd) -> Result<()> {
    let data = SynthData::read(&a.data)?;
    let tok = data.tokenizer();
    let seed = s.pick(a.seed, "seed", 0)?;
    let cfg = model_config(s, &a.model, tok.vocab_size())?;
    let tc = train_config(s, &a.schedule, seed)?;
    let corpus = Corpus::new(data.corpus.clone(), &tok, cfg.max_passage_len)?;
    let dev = dev_examples(&data);
    std::fs::create_dir_all(&a.out)?;
    let record = RunRecord { seed, model: &cfg, train: &tc };
    std::fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&record)?)?;

    let k = cfg.retrieval_fanin;
    let mut model = Model::new(cfg, tok, seed)?;
    let td = TrainData { corpus: &corpus, train: &data.train, dev: &dev, filler: &data.filler };
    let started = Instant::now();
    train(&mut model, &td, &tc, Some(&a.out), |m| {
        println!(
            "epoch {:>2} {:<12} j_gen {:.4}  j_ret {:.4}  dev_em {:.3}  dev_recall@{} {:.3}  ({:.0}s)",
            m.epoch,
            m.stage.name(),
            m.j_gen,
            m.j_ret,
            m.dev_em,
            k,
            m.dev_recall_at_k,
            m.seconds
        );
    })?;
    println!("done in {:.0}s; checkpoints in {}", started.elapsed().as_secs_f64(), a.out.display());
    Ok(())
}

fn load_corpus(model: &Model, data: &Path) -> Result<Corpus> {
    let records: Vec<CorpusRecord> = read_jsonl(&data.join("corpus.jsonl"))?;
    Ok(Corpus::new(records, &model.tokenizer, model.config.max_passage_len)?)
}

fn build_index_cmd(s: &Settings, a: BuildIndexArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&model, &a.data)?;
    let flat = build_flat_index(&model, &corpus)?;
    let kind: String = s.pick(a.index_kind, "index_kind", "flat".into())?;
    let index = match kind.as_str() {
        "flat" => AnnIndex::Flat(flat),
        "pq" => {
            let mut opts = PqTrainOptions::new(s.pick(a.pq_m, "pq_m", 4)?, s.pick(a.pq_bits, "pq_bits", 6)?);
            opts.seed = s.pick(a.seed, "seed", 0)?;
            let (codebook, _) = PqCodebook::train(flat.vectors(), flat.dim(), opts)?;
            AnnIndex::Pq(PqIndex::build(codebook, flat.ids().to_vec(), flat.vectors())?)
        }
        other => return usage(format!("index_kind must be flat or pq, got {other:?}")),
    };
    save_index(&a.out, &index)?;
    println!("{} index: {} passages, dim {} -> {}", index.kind(), index.len(), index.dim(), a.out.display());
    Ok(())
}

fn serve_cmd(s: &Settings, a: ServeArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let host: String = s.pick(a.host, "host", "127.0.0.1".into())?;
    let port = s.pick(a.port, "port", DEFAULT_PORT)?;
    let max_connections = s.pick(a.max_connections, "max_connections", 64)?;
    let state = Arc::new(if a.read_only { ServiceState::frozen(index) } else { ServiceState::new(index) });
    serve(&bind_address(&host, port), state, max_connections).context("index server")?;
    Ok(())
}

struct Retrieval {
    model: Model,
    corpus: Corpus,
    backend: Box<dyn SearchBackend>,
    k: usize,
    compression: KvCompression,
}

fn retrieval(s: &Settings, a: &RetrievalArgs) -> Result<Retrieval> {
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&model, &a.data)?;
    let backend: Box<dyn SearchBackend> = match (&a.index, &a.remote) {
        (Some(path), None) => Box::new(load_index(path)?),
        (None, Some(addr)) => Box::new(IndexClient::connect(addr.clone(), ClientOptions::default())),
        _ => return usage("pass --index FILE or --remote HOST:PORT (build one with `irag build-index`)"),
    };
    let k = s.pick(a.k, "k", model.config.retrieval_fanin)?;
    if k > model.config.retrieval_fanin {
        return usage(format!("k={k} exceeds the model's retrieval fan-in {}", model.config.retrieval_fanin));
    }
    let kind: String = s.pick(a.compression.clone(), "compression", "none".into())?;
    let compression = match kind.as_str() {
        "none" => KvCompression::None,
        "heavy_hitter" => KvCompression::HeavyHitter { keep_ratio: s.pick(a.keep_ratio, "keep_ratio", 0.5)? },
        "pq" => KvCompression::Pq(train_kv_codec(&model, &corpus, s.pick(a.seed, "seed", 0)?)?),
        other => return usage(format!("compression must be none, heavy_hitter or pq, got {other:?}")),
    };
    Ok(Retrieval { model, corpus, backend, k, compression })
}

fn infer_cmd(s: &Settings, a: InferArgs) -> Result<()> {
    let r = retrieval(s, &a.retrieval)?;
    let max_new = s.pick(a.max_new_tokens, "max_new_tokens", MAX_ANSWER_TOKENS)?;
    let prompt = prompt_tokens(&r.model, &a.query);
    let out = r.model.decode(&prompt, r.backend.as_ref(), &r.corpus, max_new, r.k, &r.compression)?;
    for id in &out.passage_ids {
        println!("passage {id}: {}", r.corpus.text(*id).unwrap_or("?"));
    }
    println!("answer: {}", r.model.tokenizer.decode(&out.tokens));
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: &'a Path,
    examples: &'a Path,
    model: &'a ModelConfig,
    compression: &'a str,
    report: &'a EvalReport,
}

fn eval_cmd(s: &Settings, a: EvalArgs) -> Result<()> {
    let r = retrieval(s, &a.retrieval)?;
    let path = a.examples.clone().unwrap_or_else(|| a.retrieval.data.join("eval.jsonl"));
    let examples: Vec<QaRecord> = read_jsonl(&path)?;
    let preds = predict(&r.model, &r.corpus, &examples, r.backend.as_ref(), r.k, &r.compression)?;
    let report = EvalReport::from_predictions(&preds, r.k);
    println!("{:<10} {:>5}  {:>6}  {:>9}", "task", "n", "em", format!("recall@{}", r.k));
    for (task, t) in &report.per_task {
        println!("{task:<10} {:>5}  {:>6.3}  {:>9.3}", t.n, t.exact_match, t.recall_at_k);
    }
    println!("{:<10} {:>5}  {:>6.3}  {:>9.3}", "all", report.n, report.exact_match, report.recall_at_k);
    if let Some(out) = &a.report {
        let record = EvalRecord {
            checkpoint: &a.retrieval.checkpoint,
            examples: &path,
            model: &r.model.config,
            compression: r.compression.name(),
            report: &report,
        };
        std::fs::write(out, serde_json::to_string_pretty(&record)?)?;
    }
    if let Some(out) = &a.predictions {
        irag_core::data::write_jsonl(out, &preds)?;
    }
    Ok(())
}

fn ablate_cmd(s: &Settings, a: AblateArgs) -> Result<()> {
    let data = SynthData::read(&a.data)?;
    let base = model_config(s, &a.model, data.tokenizer().vocab_size())?;
    let seeds_text: String = s.pick(a.seeds, "seeds", "1,2,3".into())?;
    let seeds = seeds_text
        .split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|_| Usage(format!("bad seed list {seeds_text:?}"))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return usage("need at least one seed");
    }
    let tc = train_config(s, &a.schedule, seeds[0])?;
    let grid_name: String = s.pick(a.grid, "grid", "all".into())?;
    let grids = if grid_name == "all" { Grid::ALL.to_vec() } else { vec![Grid::parse(&grid_name)?] };
    let n_eval = s.pick_opt(a.n_eval, "n_eval")?;
    let input = AblationInput { data: &data, base, train: tc, seeds, n_eval };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
    }
    for grid in grids {
        let report = run_grid(&input, grid, |run| {
            eprintln!("[{}] {} seed {}: {:?}", grid.name(), run.arm, run.seed, run.tasks);
        })?;
        println!("== {} ==\n{}", grid.name(), report.table());
        if let Some(dir) = &a.out {
            std::fs::write(dir.join(format!("{}.json", grid.name())), serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

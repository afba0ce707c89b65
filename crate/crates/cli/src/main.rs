mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decal::corruption::{read_corpus, CorruptionExample};
use decal::diagnostics::{model_grad_check, Objective};
use decal::model::{EncoderMode, ModelConfig, ModelError};
use decal::retrieval::{
    encode_corpus, ndcg_at_10, read_id_text_tsv, read_qrels, retrieval_finetune, retrieve, CompressedPassageStore,
    RetrievalError,
};
use decal::tensor::{GradCheckOptions, TensorError};
use decal::tokenizer;
use decal::train::{
    evaluate, finetune, parse_header, pretrain, Checkpoint, CheckpointError, Metric, MetricsLog, Task, TrainConfig,
    TrainError,
};
use manifest::RunManifest;
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "decal", version, about = "Compressive encoder-decoder training, encoding and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain from scratch on a newline-delimited text corpus.
    Pretrain {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fine-tune a checkpoint on seq2seq pairs or retrieval passages.
    Finetune {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        ckpt: PathBuf,
        /// `input<TAB>target` lines (seq2seq) or `id<TAB>text` passages (retrieval).
        #[arg(long)]
        data: PathBuf,
        /// Query excerpt length for retrieval fine-tuning.
        #[arg(long, default_value_t = 16)]
        query_len: usize,
    },
    /// Encode `id<TAB>text` passages into a compressed passage store.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank stored passages for `id<TAB>text` queries.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Directory for `results.tsv` and the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean NDCG@10 of retrieval against TSV qrels.
    EvalNdcg {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token accuracy or exact match on `input<TAB>target` pairs.
    EvalSeq2seq {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::TokenAccuracy)]
        metric: MetricArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a freshly initialized model.
    Gradcheck {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print a checkpoint's header summary.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct RunFlags {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    compression: Option<usize>,
    #[arg(long, value_enum)]
    encoder_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    graft_decal: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Decal,
    Attnpool,
}

impl From<ModeArg> for EncoderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => EncoderMode::Baseline,
            ModeArg::Decal => EncoderMode::Decal,
            ModeArg::Attnpool => EncoderMode::Attnpool,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    #[value(name = "span_corruption")]
    SpanCorruption,
    Autoencode,
    Seq2seq,
    Retrieval,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::SpanCorruption => Task::SpanCorruption,
            TaskArg::Autoencode => Task::Autoencode,
            TaskArg::Seq2seq => Task::Seq2seqFinetune,
            TaskArg::Retrieval => Task::RetrievalFinetune,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    #[value(name = "token_accuracy")]
    TokenAccuracy,
    #[value(name = "exact_match")]
    ExactMatch,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

/// Failure with its exit code: 1 usage, 2 data, 3 numeric.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::Usage(e.to_string()),
            ModelError::Tensor(TensorError::NonFinite { .. }) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => Failure::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Train(t) => t.into(),
            RetrievalError::Model(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config_file(path: Option<&Path>, m: &mut RunManifest) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path)?;
    m.input(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Applies mode and compression flags; a mode flag without a ratio picks
/// the ratio that mode requires.
fn apply_model_flags(cfg: &mut ModelConfig, run: &RunFlags) {
    if let Some(mode) = run.encoder_mode {
        cfg.encoder_mode = mode.into();
        cfg.compression_ratio = match cfg.encoder_mode {
            EncoderMode::Baseline => 1,
            EncoderMode::Attnpool => 2,
            EncoderMode::Decal if cfg.compression_ratio < 2 => 2,
            EncoderMode::Decal => cfg.compression_ratio,
        };
    }
    if let Some(c) = run.compression {
        cfg.compression_ratio = c;
    }
}

fn apply_train_flags(tcfg: &mut TrainConfig, run: &RunFlags) {
    if let Some(s) = run.seed {
        tcfg.seed = s;
    }
    if let Some(s) = run.steps {
        tcfg.steps = s;
    }
    if let Some(t) = run.task {
        tcfg.task = t.into();
    }
    if run.graft_decal {
        tcfg.graft_decal = true;
    }
}

fn out_dir(run: &RunFlags, default: &str) -> Result<PathBuf> {
    let dir = run.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_training_outputs(
    dir: &Path,
    ckpt: &Checkpoint,
    metrics: &[decal::train::MetricRecord],
    mut m: RunManifest,
) -> Result<()> {
    let ck_path = dir.join("checkpoint.bin");
    ckpt.save(&ck_path)?;
    let metrics_path = dir.join("metrics.jsonl");
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    MetricsLog::write_all(&metrics_path, metrics)?;
    m.output(&ck_path)?;
    m.output(&metrics_path)?;
    if let Some(last) = metrics.last() {
        println!("step {} loss {:.4} accuracy {:.4}", last.step, last.loss, last.accuracy);
    }
    let path = m.finish(dir.join("manifest.json"))?;
    println!("wrote {} and {}", ck_path.display(), path.display());
    Ok(())
}

fn instability_note(cfg: &ModelConfig, m: &mut RunManifest) {
    if cfg.encoder_mode == EncoderMode::Decal && cfg.compression_ratio >= 16 {
        let note = format!(
            "compression ratio {} is known to make pretraining unstable; loss may diverge and accuracy may lag lower ratios",
            cfg.compression_ratio
        );
        eprintln!("warning: {note}");
        m.notes.push(note);
    }
}

fn cmd_pretrain(run: &RunFlags, corpus: &Path) -> Result<()> {
    let mut m = RunManifest::start("pretrain");
    let file = load_config_file(run.config.as_deref(), &mut m)?;
    let mut cfg = file.model.unwrap_or_default();
    let mut tcfg = file.train.unwrap_or_default();
    apply_model_flags(&mut cfg, run);
    apply_train_flags(&mut tcfg, run);
    cfg.validate()?;
    tcfg.validate()?;
    if tcfg.graft_decal {
        return Err(Failure::Usage("--graft-decal applies to finetune".into()));
    }
    instability_note(&cfg, &mut m);
    m.input(corpus)?;
    let docs = read_corpus(corpus).map_err(|e| Failure::Data(e.to_string()))?;
    let dir = out_dir(run, "runs/pretrain")?;
    let (ckpt, metrics) = pretrain(&cfg, &tcfg, &docs)?;
    m.seed = Some(tcfg.seed);
    m.model = Some(cfg);
    m.train = Some(tcfg);
    write_training_outputs(&dir, &ckpt, &metrics, m)
}

fn read_pairs(path: &Path) -> Result<Vec<CorruptionExample>> {
    let rows = read_id_text_tsv(path)?;
    if rows.is_empty() {
        return Err(Failure::Data(format!("{} has no examples", path.display())));
    }
    Ok(rows
        .into_iter()
        .map(|(input, target)| CorruptionExample::seq2seq(tokenizer::encode(input.as_bytes()), &tokenizer::encode(target.as_bytes())))
        .collect())
}

fn read_texts(path: &Path) -> Result<Vec<(String, Vec<u32>)>> {
    Ok(read_id_text_tsv(path)?
        .into_iter()
        .map(|(id, text)| (id, tokenizer::encode(text.as_bytes())))
        .collect())
}

fn cmd_finetune(run: &RunFlags, ckpt_path: &Path, data: &Path, query_len: usize) -> Result<()> {
    let mut m = RunManifest::start("finetune");
    let file = load_config_file(run.config.as_deref(), &mut m)?;
    m.input(ckpt_path)?;
    m.input(data)?;
    let base = Checkpoint::load(ckpt_path)?;
    let mut cfg = file.model.unwrap_or_else(|| base.config.clone());
    let mut tcfg = file.train.unwrap_or(TrainConfig {
        task: Task::Seq2seqFinetune,
        ..TrainConfig::default()
    });
    apply_train_flags(&mut tcfg, run);
    if tcfg.graft_decal && run.encoder_mode.is_none() {
        cfg.encoder_mode = EncoderMode::Decal;
        if cfg.compression_ratio < 2 {
            cfg.compression_ratio = 2;
        }
    }
    apply_model_flags(&mut cfg, run);
    cfg.validate()?;
    tcfg.validate()?;
    let dir = out_dir(run, "runs/finetune")?;
    let (ckpt, metrics) = match tcfg.task {
        Task::Seq2seqFinetune => finetune(&base, &cfg, &tcfg, &read_pairs(data)?)?,
        Task::RetrievalFinetune => {
            if tcfg.graft_decal || cfg.encoder_mode != base.config.encoder_mode {
                return Err(Failure::Usage("retrieval fine-tuning keeps the checkpoint's encoder mode".into()));
            }
            let passages: Vec<Vec<u32>> = read_texts(data)?.into_iter().map(|(_, t)| t).collect();
            retrieval_finetune(&cfg, &tcfg, Some(base.params.clone()), &passages, query_len)?
        }
        other => return Err(Failure::Usage(format!("finetune runs seq2seq or retrieval, not {other}"))),
    };
    m.seed = Some(tcfg.seed);
    m.model = Some(cfg);
    m.train = Some(tcfg);
    write_training_outputs(&dir, &ckpt, &metrics, m)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_encode(ckpt_path: &Path, input: &Path, out: &Path) -> Result<()> {
    let mut m = RunManifest::start("encode");
    m.input(ckpt_path)?;
    m.input(input)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let passages = read_texts(input)?;
    let store = encode_corpus(&ckpt.config, &ckpt.params, &passages)?;
    store.save(out)?;
    m.output(out)?;
    println!(
        "encoded {} passages into {} vectors (C={}), {}",
        store.records.len(),
        store.total_vectors(),
        store.compression,
        out.display()
    );
    m.model = Some(ckpt.config);
    m.finish(sibling_manifest(out))?;
    Ok(())
}

struct Ranking {
    query_id: String,
    ranked: Vec<decal::retrieval::Ranked>,
}

fn rank_queries(ckpt_path: &Path, store_path: &Path, queries: &Path, k: usize, m: &mut RunManifest) -> Result<(Vec<Ranking>, u64)> {
    m.input(ckpt_path)?;
    m.input(store_path)?;
    m.input(queries)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let store = CompressedPassageStore::load(store_path)?;
    let mut out = Vec::new();
    let mut dots = 0;
    for (id, tokens) in read_texts(queries)? {
        let r = retrieve(&ckpt.config, &ckpt.params, &store, &tokens, k)?;
        dots += r.dot_products;
        out.push(Ranking {
            query_id: id,
            ranked: r.ranked,
        });
    }
    m.model = Some(ckpt.config);
    Ok((out, dots))
}

fn finish_optional(m: RunManifest, out: Option<&Path>, files: &[(&str, String)]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let mut m = m;
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        m.output(&p)?;
    }
    m.finish(dir.join("manifest.json"))?;
    Ok(())
}

fn cmd_retrieve(ckpt: &Path, store: &Path, queries: &Path, k: usize, out: Option<&Path>) -> Result<()> {
    let mut m = RunManifest::start("retrieve");
    let (rankings, dots) = rank_queries(ckpt, store, queries, k, &mut m)?;
    let mut tsv = String::new();
    for r in &rankings {
        for (rank, hit) in r.ranked.iter().enumerate() {
            tsv.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.query_id, hit.id, rank + 1, hit.score));
        }
    }
    print!("{tsv}");
    eprintln!("dot products: {dots}");
    finish_optional(m, out, &[("results.tsv", tsv)])
}

fn cmd_eval_ndcg(ckpt: &Path, store: &Path, queries: &Path, qrels_path: &Path, out: Option<&Path>) -> Result<()> {
    let mut m = RunManifest::start("eval-ndcg");
    let qrels = read_qrels(qrels_path)?;
    m.input(qrels_path)?;
    let (rankings, _) = rank_queries(ckpt, store, queries, 10, &mut m)?;
    let mut scores = Vec::new();
    let mut report = String::new();
    for r in &rankings {
        let Some(rels) = qrels.get(&r.query_id) else { continue };
        let ids: Vec<String> = r.ranked.iter().map(|h| h.id.clone()).collect();
        let s = ndcg_at_10(&ids, rels)?;
        report.push_str(&format!("{}\t{s:.6}\n", r.query_id));
        scores.push(s);
    }
    if scores.is_empty() {
        return Err(Failure::Data("no query has qrels".into()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    report.push_str(&format!("mean\t{mean:.6}\n"));
    print!("{report}");
    finish_optional(m, out, &[("ndcg.tsv", report)])
}

fn cmd_eval_seq2seq(ckpt_path: &Path, data: &Path, metric: MetricArg, out: Option<&Path>) -> Result<()> {
    let mut m = RunManifest::start("eval-seq2seq");
    m.input(ckpt_path)?;
    m.input(data)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let metric = match metric {
        MetricArg::TokenAccuracy => Metric::TokenAccuracy,
        MetricArg::ExactMatch => Metric::ExactMatch,
    };
    let score = evaluate(&ckpt.config, &ckpt.params, &read_pairs(data)?, metric)?;
    let line = format!("{metric:?}\t{score:.6}\n");
    print!("{line}");
    m.model = Some(ckpt.config);
    finish_optional(m, out, &[("eval.tsv", line)])
}

fn cmd_gradcheck(run: &RunFlags, tolerance: f64) -> Result<()> {
    let mut m = RunManifest::start("gradcheck");
    let file = load_config_file(run.config.as_deref(), &mut m)?;
    let mut cfg = file.model.unwrap_or_else(ModelConfig::tiny);
    apply_model_flags(&mut cfg, run);
    cfg.validate()?;
    let objective = match run.task.map(Task::from) {
        None | Some(Task::SpanCorruption | Task::Seq2seqFinetune | Task::Autoencode) => Objective::Seq2seq,
        Some(Task::RetrievalFinetune) => Objective::Contrastive,
    };
    let seed = run.seed.unwrap_or(0);
    let report = model_grad_check(&cfg, objective, seed, &GradCheckOptions { seed, ..Default::default() })?;
    println!(
        "max relative error {:.3e} (worst `{}`, {} coordinates, eps {:e})",
        report.max_rel_error, report.worst_param, report.coordinates_checked, report.eps
    );
    m.seed = Some(seed);
    m.model = Some(cfg);
    let passed = report.passes(tolerance);
    m.notes.push(format!("max_rel_error={:e} tolerance={tolerance:e} passed={passed}", report.max_rel_error));
    if run.out.is_some() {
        let dir = out_dir(run, "")?;
        m.finish(dir.join("manifest.json"))?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed: {:.3e} >= {tolerance:e}", report.max_rel_error)))
    }
}

fn cmd_inspect(ckpt_path: &Path) -> Result<()> {
    let bytes = std::fs::read(ckpt_path)?;
    let (header, _) = parse_header(&bytes)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let summary = serde_json::json!({
        "format_version": header.format_version,
        "step": header.step,
        "config": header.config,
        "tensors": header.tensors.len(),
        "parameters": ckpt.params.count(),
        "optimizer_state": ckpt.optimizer.is_some(),
        "payload_bytes": header.payload_bytes,
        "payload_sha256": header.payload_sha256,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain { run, corpus } => cmd_pretrain(run, corpus),
        Command::Finetune {
            run,
            ckpt,
            data,
            query_len,
        } => cmd_finetune(run, ckpt, data, *query_len),
        Command::Encode { ckpt, input, out } => cmd_encode(ckpt, input, out),
        Command::Retrieve {
            ckpt,
            store,
            queries,
            k,
            out,
        } => cmd_retrieve(ckpt, store, queries, *k, out.as_deref()),
        Command::EvalNdcg {
            ckpt,
            store,
            queries,
            qrels,
            out,
        } => cmd_eval_ndcg(ckpt, store, queries, qrels, out.as_deref()),
        Command::EvalSeq2seq { ckpt, data, metric, out } => cmd_eval_seq2seq(ckpt, data, *metric, out.as_deref()),
        Command::Gradcheck { run, tolerance } => cmd_gradcheck(run, *tolerance),
        Command::InspectCkpt { ckpt } => cmd_inspect(ckpt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

//! Command-line surface: dataset generation, encoder pretraining, training,
//! evaluation, ablations, grid search, and graph inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dgcn::ablation::{ablation_table_text, run_ablation_suite, write_ablation_csv};
use dgcn::cnn::{cnn_head_specs, cnn_param_specs, encode_features, pretrain_cnn, CnnConfig};
use dgcn::data::{
    apply_feature_cache, load_conversations, load_dataset, save_conversations, split_holdout,
    write_feature_cache, write_predictions, Conversation, Dataset, EmbeddingTable, Manifest,
    TaskMode,
};
use dgcn::graph::{build_graph, dump_graph, speaker_roles, RelationRegistry};
use dgcn::model::{forward_conversation, ModelConfig};
use dgcn::params::{bind, init_params, load_params, save_params};
use dgcn::synthetic::{generate, SyntheticConfig, SyntheticTask};
use dgcn::tape::Tape;
use dgcn::trainer::{
    ensure_features, evaluate, grid_search, grid_table_text, prepare_all, train, write_grid_csv,
    write_metric_csv, EvalOutcome, GridSpec, TrainConfig,
};
use dgcn::{Error, Result};

#[derive(Parser)]
#[command(name = "dgcn", version, about = "Conversation-graph classifier over dialogue transcripts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the token encoder on utterance labels and cache features.
    PretrainCnn(PretrainCnnArgs),
    /// Train the graph model; writes metrics, parameters, and predictions.
    Train(TrainArgs),
    /// Score a saved checkpoint on one split.
    Eval(EvalArgs),
    /// Train and score every encoder and relation ablation.
    Ablate(AblateArgs),
    /// Sweep learning rate, penalty weight, and window over a grid.
    Grid(GridArgs),
    /// Print a conversation's graph as JSON lines.
    DumpGraph(DumpGraphArgs),
    /// Write a synthetic dataset with its manifest.
    GenSynthetic(GenSyntheticArgs),
}

// ── shared argument groups ──

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (JSON with train/test paths and task mode).
    #[arg(long)]
    manifest: PathBuf,
    /// Word embedding file, `token v1 .. vd` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Directory of feature caches written by pretrain-cnn.
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Past,future context window.
    #[arg(long, value_parser = parse_window, default_value = "10,10")]
    window: (usize, usize),
    /// Replace the sequential encoder with a linear projection.
    #[arg(long)]
    no_sequential: bool,
    /// Skip the speaker graph; classify sequential features alone.
    #[arg(long)]
    no_speaker: bool,
    /// Collapse speaker-pair relation typing.
    #[arg(long)]
    drop_speaker_rel: bool,
    /// Collapse temporal relation typing.
    #[arg(long)]
    drop_temporal_rel: bool,
    /// Learn per-relation neighborhood scales instead of 1/|N|.
    #[arg(long)]
    learned_normalizer: bool,
    /// Fine-tune the token encoder jointly with the graph model.
    #[arg(long)]
    end_to_end: bool,
    /// Sequential encoder state size per direction.
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    /// Output width of both graph convolution steps.
    #[arg(long, default_value_t = 100)]
    graph_dim: usize,
    /// Hidden width of the classifier head.
    #[arg(long, default_value_t = 100)]
    cls_hidden: usize,
    /// Utterance feature width produced by the token encoder.
    #[arg(long, default_value_t = 100)]
    feature_dim: usize,
    /// Cap on distinct speaker roles.
    #[arg(long)]
    max_speakers: Option<usize>,
}

#[derive(Args)]
struct TrainHyperArgs {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// L2 penalty weight on all parameters.
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Dialogues per gradient step.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the per-epoch scoring pass over the training split.
    #[arg(long)]
    no_train_metrics: bool,
    /// Epochs for encoder pretraining when the dataset is token-only.
    #[arg(long, default_value_t = 25)]
    pretrain_epochs: usize,
    /// Learning rate for encoder pretraining.
    #[arg(long, default_value_t = 3e-3)]
    pretrain_lr: f64,
}

impl TrainHyperArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            l2_lambda: self.lambda,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            train_metrics: !self.no_train_metrics,
            ..TrainConfig::default()
        }
    }
}

// ── subcommand arguments ──

#[derive(Args)]
struct PretrainCnnArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Filter widths of the convolution stack.
    #[arg(long, default_value = "3,4,5")]
    widths: String,
    /// Feature maps per filter width.
    #[arg(long, default_value_t = 50)]
    maps: usize,
    #[arg(long, default_value_t = 100)]
    feature_dim: usize,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint written by train.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// L2 penalty folded into the reported loss.
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    /// Also write alpha.csv and beta.csv with attention weights.
    #[arg(long)]
    dump_attention: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    /// Learning rates to sweep.
    #[arg(long, default_value = "1e-4")]
    lrs: String,
    /// Penalty weights to sweep.
    #[arg(long, default_value = "1e-5")]
    lambdas: String,
    /// Windows to sweep, e.g. "0,0;4,4;10,10".
    #[arg(long, default_value = "10,10")]
    windows: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpGraphArgs {
    /// Conversation JSONL file.
    #[arg(long)]
    conversations: PathBuf,
    /// Conversation id to dump; defaults to the first in the file.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, value_parser = parse_window, default_value = "10,10")]
    window: (usize, usize),
    #[arg(long, default_value_t = 8)]
    max_speakers: usize,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// One of: echo, context, self-inertia.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 100)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 30)]
    test: usize,
    /// Inclusive dialogue length range.
    #[arg(long, value_parser = parse_window, default_value = "5,10")]
    len: (usize, usize),
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
}

// ── parsers ──

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated integers, got {s:?}"))?;
    let p = a.trim().parse().map_err(|e| format!("bad integer {a:?}: {e}"))?;
    let f = b.trim().parse().map_err(|e| format!("bad integer {b:?}: {e}"))?;
    Ok((p, f))
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad {what} value {t:?}: {e}")))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad {what} value {t:?}: {e}")))
        })
        .collect()
}

fn parse_window_list(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(';')
        .map(|w| parse_window(w.trim()).map_err(Error::Config))
        .collect()
}

// ── assembly helpers ──

fn load_table(path: &Option<PathBuf>) -> Result<Option<EmbeddingTable>> {
    match path {
        Some(p) => Ok(Some(EmbeddingTable::load(p)?)),
        None => Ok(None),
    }
}

/// Applies cached features from `dir` to every split that has a cache file.
fn apply_caches(dataset: &mut Dataset, dir: &Path) -> Result<()> {
    for (name, split) in [
        ("train", &mut dataset.train),
        ("val", &mut dataset.val),
        ("test", &mut dataset.test),
    ] {
        let path = dir.join(format!("features-{name}.jsonl"));
        if path.exists() && !split.is_empty() {
            apply_feature_cache(&path, split)?;
        }
    }
    Ok(())
}

/// Builds the model configuration for a loaded dataset, resolving the
/// feature width from the data unless the token encoder will produce it.
fn model_config(
    dataset: &Dataset,
    args: &ModelArgs,
    table: Option<&EmbeddingTable>,
) -> Result<ModelConfig> {
    let wants_cnn = args.end_to_end || !dataset.fully_featured();
    let feature_dim = if wants_cnn {
        args.feature_dim
    } else {
        dataset
            .feature_dim()
            .ok_or_else(|| Error::Data("dataset has no usable features".into()))?
    };
    let max_speakers = args
        .max_speakers
        .unwrap_or_else(|| dataset.max_speakers().max(1));
    let mut cfg = ModelConfig::new(dataset.mode, dataset.out_dim, feature_dim, max_speakers);
    cfg.window = args.window;
    cfg.gru_hidden = args.hidden;
    cfg.rgcn_out1 = args.graph_dim;
    cfg.rgcn_out2 = args.graph_dim;
    cfg.cls_hidden = args.cls_hidden;
    cfg.no_sequential = args.no_sequential;
    cfg.no_speaker = args.no_speaker;
    cfg.speaker_typed = !args.drop_speaker_rel;
    cfg.temporal_typed = !args.drop_temporal_rel;
    cfg.learned_normalizer = args.learned_normalizer;
    cfg.end_to_end = args.end_to_end;
    if wants_cnn {
        let table = table.ok_or_else(|| {
            Error::Config("token utterances need --embeddings to build features".into())
        })?;
        cfg.cnn = Some(CnnConfig {
            out_dim: args.feature_dim,
            embed_dim: table.dim,
            ..CnnConfig::default()
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn print_eval(prefix: &str, ev: &EvalOutcome) {
    match (&ev.report, &ev.mae) {
        (Some(report), _) => println!(
            "{prefix}: loss {:.6}, accuracy {:.6}, weighted F1 {:.6}",
            ev.loss, report.accuracy, report.weighted_f1
        ),
        (None, Some(mae)) => {
            let cells: Vec<String> = mae.iter().map(|m| format!("{m:.6}")).collect();
            println!(
                "{prefix}: loss {:.6}, mae {} (mean {:.6})",
                ev.loss,
                cells.join(","),
                ev.mean_mae().unwrap()
            );
        }
        (None, None) => println!("{prefix}: loss {:.6}", ev.loss),
    }
}

/// Dataset ready for the model: caches applied, validation split present,
/// features built (pretraining the encoder when needed).
fn stage_dataset(
    data: &DataArgs,
    model: &ModelArgs,
    hyper: &TrainHyperArgs,
) -> Result<(Dataset, ModelConfig, Option<EmbeddingTable>)> {
    let mut dataset = load_dataset(&data.manifest)?;
    if let Some(dir) = &data.features_dir {
        apply_caches(&mut dataset, dir)?;
    }
    let table = load_table(&data.embeddings)?;
    let cfg = model_config(&dataset, model, table.as_ref())?;
    let mut dataset = dataset;
    if dataset.val.is_empty() {
        dataset.val = split_holdout(&mut dataset.train, hyper.seed);
    }
    if let Some((report, _)) = ensure_features(
        &mut dataset,
        &cfg,
        table.as_ref(),
        hyper.pretrain_epochs,
        hyper.pretrain_lr,
        hyper.seed,
    )? {
        println!(
            "pretrained token encoder: {} epochs, train accuracy {:.6}",
            report.epoch_losses.len(),
            report.accuracy
        );
    }
    Ok((dataset, cfg, table))
}

// ── subcommands ──

fn run_pretrain_cnn(args: PretrainCnnArgs) -> Result<()> {
    let mut dataset = load_dataset(&args.data.manifest)?;
    if dataset.mode == TaskMode::Regression {
        return Err(Error::Config(
            "pretraining needs class labels; regression datasets train end to end".into(),
        ));
    }
    let table = load_table(&args.data.embeddings)?
        .ok_or_else(|| Error::Config("pretrain-cnn needs --embeddings".into()))?;
    let cfg = CnnConfig {
        filter_widths: parse_usize_list(&args.widths, "filter width")?,
        maps_per_width: args.maps,
        pool_window: 2,
        out_dim: args.feature_dim,
        embed_dim: table.dim,
    };
    let mut specs = cnn_param_specs(&cfg);
    specs.extend(cnn_head_specs(&cfg, dataset.out_dim));
    let mut params = init_params(&specs, args.seed)?;
    let report = pretrain_cnn(
        &dataset.train,
        &table,
        &mut params,
        &cfg,
        args.epochs,
        args.lr,
        args.seed,
    )?;
    println!(
        "pretrained {} epochs, final train accuracy {:.6}",
        report.epoch_losses.len(),
        report.accuracy
    );

    ensure_out_dir(&args.out)?;
    save_params(&args.out.join("cnn-params.json"), &params)?;
    for (name, split) in [
        ("train", &mut dataset.train),
        ("val", &mut dataset.val),
        ("test", &mut dataset.test),
    ] {
        if split.is_empty() {
            continue;
        }
        encode_features(split, &table, &params, &cfg)?;
        let path = args.out.join(format!("features-{name}.jsonl"));
        write_feature_cache(&path, split)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (dataset, cfg, table) = stage_dataset(&args.data, &args.model, &args.hyper)?;
    let train_in = prepare_all(&dataset.train, &cfg, table.as_ref())?;
    let val_in = prepare_all(&dataset.val, &cfg, table.as_ref())?;
    let test_in = prepare_all(&dataset.test, &cfg, table.as_ref())?;

    let tc = args.hyper.config();
    let result = train(&train_in, &val_in, &cfg, &tc, table.as_ref())?;
    if let Some(epoch) = result.diverged_at {
        println!("diverged at epoch {epoch}; keeping the last finished checkpoint");
    }
    if let Some(epoch) = result.best_epoch {
        println!("best checkpoint from epoch {epoch}");
    }

    ensure_out_dir(&args.out)?;
    let metrics = args.out.join("metrics.csv");
    write_metric_csv(&metrics, &result.history)?;
    let params_path = args.out.join("params.json");
    save_params(&params_path, &result.params)?;
    println!("wrote {} and {}", metrics.display(), params_path.display());

    if !test_in.is_empty() {
        let ev = evaluate(&test_in, &result.params, &cfg, tc.l2_lambda, table.as_ref())?;
        print_eval("test", &ev);
        let preds = args.out.join("predictions.jsonl");
        write_predictions(&preds, &ev.predictions)?;
        println!("wrote {}", preds.display());
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut dataset = load_dataset(&args.data.manifest)?;
    if let Some(dir) = &args.data.features_dir {
        apply_caches(&mut dataset, dir)?;
    }
    let table = load_table(&args.data.embeddings)?;
    let cfg = model_config(&dataset, &args.model, table.as_ref())?;
    if !cfg.end_to_end && !dataset.fully_featured() {
        return Err(Error::Config(
            "dataset lacks features; pass --features-dir from pretrain-cnn or --end-to-end".into(),
        ));
    }
    let params = load_params(&args.params)?;
    let split = match args.split.as_str() {
        "train" => &dataset.train,
        "val" => &dataset.val,
        _ => &dataset.test,
    };
    if split.is_empty() {
        return Err(Error::Data(format!("split {:?} is empty", args.split)));
    }
    let inputs = prepare_all(split, &cfg, table.as_ref())?;
    let ev = evaluate(&inputs, &params, &cfg, args.lambda, table.as_ref())?;
    print_eval(&args.split, &ev);

    ensure_out_dir(&args.out)?;
    let preds = args.out.join("predictions.jsonl");
    write_predictions(&preds, &ev.predictions)?;
    println!("wrote {}", preds.display());

    if args.dump_attention {
        let mut alpha = String::from("id,i,j,weight\n");
        let mut beta = String::from("id,i,j,weight\n");
        for input in &inputs {
            let mut tape = Tape::new();
            let binding = bind(&mut tape, &params)?;
            let embed = match (cfg.end_to_end, table.as_ref()) {
                (true, Some(t)) => Some(dgcn::cnn::embed_leaf(&mut tape, t)?),
                _ => None,
            };
            let fwd = forward_conversation(&mut tape, &binding, &cfg, input, embed)?;
            if let Some(a) = fwd.alpha {
                for (k, w) in tape.data(a).iter().enumerate() {
                    if *w != 0.0 {
                        alpha.push_str(&format!(
                            "{},{},{},{w}\n",
                            input.id,
                            k / input.n,
                            k % input.n
                        ));
                    }
                }
            }
            for (k, w) in tape.data(fwd.beta).iter().enumerate() {
                beta.push_str(&format!("{},{},{},{w}\n", input.id, k / input.n, k % input.n));
            }
        }
        for (name, text) in [("alpha.csv", alpha), ("beta.csv", beta)] {
            let path = args.out.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let (dataset, cfg, table) = stage_dataset(&args.data, &args.model, &args.hyper)?;
    let train_in = prepare_all(&dataset.train, &cfg, table.as_ref())?;
    let val_in = prepare_all(&dataset.val, &cfg, table.as_ref())?;
    let test_in = prepare_all(&dataset.test, &cfg, table.as_ref())?;
    let tc = args.hyper.config();
    let tables = run_ablation_suite(&train_in, &val_in, &test_in, &cfg, &tc, table.as_ref())?;
    print!(
        "{}",
        ablation_table_text("context encoders", &tables.encoder, cfg.mode)
    );
    print!(
        "{}",
        ablation_table_text("edge relations", &tables.relation, cfg.mode)
    );
    ensure_out_dir(&args.out)?;
    let path = args.out.join("ablation.csv");
    write_ablation_csv(&path, &tables)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_grid(args: GridArgs) -> Result<()> {
    let (dataset, cfg, table) = stage_dataset(&args.data, &args.model, &args.hyper)?;
    let train_in = prepare_all(&dataset.train, &cfg, table.as_ref())?;
    let val_in = prepare_all(&dataset.val, &cfg, table.as_ref())?;
    let grid = GridSpec {
        lrs: parse_f64_list(&args.lrs, "learning rate")?,
        lambdas: parse_f64_list(&args.lambdas, "penalty")?,
        windows: parse_window_list(&args.windows)?,
    };
    let tc = args.hyper.config();
    let (best, rows) = grid_search(&train_in, &val_in, &cfg, &tc, &grid, table.as_ref())?;
    print!("{}", grid_table_text(&rows, best, cfg.mode));
    ensure_out_dir(&args.out)?;
    let path = args.out.join("grid.csv");
    write_grid_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_dump_graph(args: DumpGraphArgs) -> Result<()> {
    let convs = load_conversations(&args.conversations)?;
    let conv: &Conversation = match &args.id {
        Some(id) => convs
            .iter()
            .find(|c| &c.id == id)
            .ok_or_else(|| Error::Data(format!("no conversation with id {id:?}")))?,
        None => convs
            .first()
            .ok_or_else(|| Error::Data("conversation file is empty".into()))?,
    };
    let roles = speaker_roles(conv, args.max_speakers);
    let m = roles.iter().max().map_or(1, |r| r + 1);
    let reg = RelationRegistry::new(m)?;
    let graph = build_graph(&roles, args.window, &reg, None)?;
    let mut out = std::io::stdout().lock();
    dump_graph(&mut out, conv, &graph)?;
    Ok(())
}

fn run_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let task: SyntheticTask = args.task.parse()?;
    let dataset = generate(&SyntheticConfig {
        task,
        n_train: args.train,
        n_val: args.val,
        n_test: args.test,
        len_range: args.len,
        num_speakers: args.speakers,
        num_classes: args.classes,
        seed: args.seed,
    })?;
    ensure_out_dir(&args.out)?;
    save_conversations(&args.out.join("train.jsonl"), &dataset.train)?;
    save_conversations(&args.out.join("test.jsonl"), &dataset.test)?;
    if !dataset.val.is_empty() {
        save_conversations(&args.out.join("val.jsonl"), &dataset.val)?;
    }
    let manifest = Manifest {
        train: "train.jsonl".into(),
        val: (!dataset.val.is_empty()).then(|| "val.jsonl".into()),
        test: "test.jsonl".into(),
        mode: dataset.mode,
        num_classes: Some(dataset.out_dim),
        attributes: None,
    };
    let path = args.out.join("manifest.json");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::PretrainCnn(args) => run_pretrain_cnn(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Grid(args) => run_grid(args),
        Command::DumpGraph(args) => run_dump_graph(args),
        Command::GenSynthetic(args) => run_gen_synthetic(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphmt::bleu::{corpus_bleu, format_bleu};
use graphmt::checkpoint;
use graphmt::config::RunConfig;
use graphmt::dataset::{build_vocabularies, load_records, to_examples, LoadedRecord};
use graphmt::decode::{beam_decode, default_max_len, greedy_decode};
use graphmt::gradcheck::{run_toy, Ablation, DEFAULT_STEP, DEFAULT_TOLERANCE};
use graphmt::graph::build_graph_with;
use graphmt::model::Model;
use graphmt::nn::Ctx;
use graphmt::synthetic::{generate, SyntheticSpec};
use graphmt::tape::Tape;
use graphmt::training::{evaluate_loss, train, OptimizerState, StepLog};
use graphmt::{Error, Vocabulary};

#[derive(Parser)]
#[command(name = "graphmt", version, about = "Graph-based multi-modal fusion NMT")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus a loss curve.
    Train(TrainArgs),
    /// Translate a JSONL file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        hypotheses: PathBuf,
        references: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a toy model.
    GradCheck(GradCheckArgs),
    /// Print the graph built for one dataset line.
    InspectGraph(InspectArgs),
    /// Print per-group trainable parameter counts for a configuration.
    Params(ParamsArgs),
    /// Write a seeded synthetic grounded corpus.
    Synth(SynthArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    no_inter_modal_fusion: bool,
    #[arg(long)]
    fully_connected_grounding: bool,
    #[arg(long)]
    unified_parameters: bool,
    /// textual | visual | both
    #[arg(long)]
    decoder_attend: Option<String>,
    /// Give object-free sentences a single zero-vector object.
    #[arg(long)]
    zero_object: bool,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Error> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        put("d_model", self.d_model.map(|v| v.to_string()));
        put("d_ff", self.d_ff.map(|v| v.to_string()));
        put("n_heads", self.n_heads.map(|v| v.to_string()));
        put("enc_layers", self.enc_layers.map(|v| v.to_string()));
        put("dec_layers", self.dec_layers.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("feature_dim", self.feature_dim.map(|v| v.to_string()));
        put("inter_modal_fusion", self.no_inter_modal_fusion.then(|| "false".into()));
        put("fully_connected_grounding", self.fully_connected_grounding.then(|| "true".into()));
        put("unified_parameters", self.unified_parameters.then(|| "true".into()));
        put("decoder_attend", self.decoder_attend.clone());
        put("zero_object", self.zero_object.then(|| "true".into()));
        put("batch_tokens", self.batch_tokens.map(|v| v.to_string()));
        put("warmup_steps", self.warmup_steps.map(|v| v.to_string()));
        put("lr_factor", self.lr_factor.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("max_steps", self.max_steps.map(|v| v.to_string()));
        put("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        put("clip_norm", self.clip_norm.map(|v| v.to_string()));
        put("src_vocab", self.src_vocab.as_ref().map(|p| p.display().to_string()));
        put("tgt_vocab", self.tgt_vocab.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            kv.push((k.trim().into(), v.trim().into()));
        }
        Ok(kv)
    }

    /// File values first, then flags, on top of `base`.
    fn resolve(&self, mut base: RunConfig) -> Result<RunConfig, Error> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            base.apply_text(&text)?;
        }
        for (k, v) in self.overrides()? {
            base.set(&k, &v)?;
        }
        base.validate()?;
        Ok(base)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training data (JSONL).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation data (JSONL).
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory for checkpoints, vocabularies and the loss curve.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input JSONL; `tgt` may be omitted.
    #[arg(long)]
    input: PathBuf,
    /// Beam size; 1 or absent means greedy.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Write per-sentence encoder intermediates as JSON lines.
    #[arg(long)]
    dump_json: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Ablation to check (repeatable), or `all`.
    #[arg(long)]
    ablation: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    data: PathBuf,
    /// 1-based line number.
    line: usize,
    #[arg(long)]
    fully_connected_grounding: bool,
    #[arg(long, default_value_t = graphmt::graph::FEATURE_DIM)]
    feature_dim: usize,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 50)]
    src_vocab_size: usize,
    #[arg(long, default_value_t = 50)]
    tgt_vocab_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    out: PathBuf,
    #[arg(long, default_value = "train")]
    name: String,
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = graphmt::graph::FEATURE_DIM)]
    feature_dim: usize,
}

/// Failure with a process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::CheckpointMismatch { .. } => 3,
            Error::Numeric(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Translate(a) => cmd_translate(a),
        Cmd::Evaluate {
            hypotheses,
            references,
        } => cmd_evaluate(&hypotheses, &references),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::InspectGraph(a) => cmd_inspect(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn vocab_or_build(
    path: Option<&Path>,
    built: Vocabulary,
) -> Result<Vocabulary, Error> {
    match path {
        Some(p) if p.exists() => Vocabulary::load(p),
        _ => Ok(built),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.cfg.resolve(RunConfig::default())?;
    if let Some(p) = a.train {
        cfg.train_data = Some(p);
    }
    if let Some(p) = a.valid {
        cfg.valid_data = Some(p);
    }
    if let Some(p) = a.checkpoint_dir {
        cfg.checkpoint_dir = Some(p);
    }
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("no training data given (--train)".into()))?;
    let out = cfg
        .checkpoint_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--checkpoint-dir)".into()))?;
    let records = load_records(&train_path, cfg.feature_dim)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no examples", train_path.display())).into());
    }
    let (sv, tv) = build_vocabularies(&records);
    let src = vocab_or_build(cfg.src_vocab.as_deref(), sv)?;
    let tgt = vocab_or_build(cfg.tgt_vocab.as_deref(), tv)?;
    let opts = cfg.dataset_options();
    let examples = to_examples(&records, &src, &tgt, &opts)?;
    cfg.check_examples(&examples)?;
    let valid = match &cfg.valid_data {
        Some(p) => {
            let v = to_examples(&load_records(p, cfg.feature_dim)?, &src, &tgt, &opts)?;
            cfg.check_examples(&v)?;
            Some(v)
        }
        None => None,
    };

    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    src.save(&out.join("src.vocab"))?;
    tgt.save(&out.join("tgt.vocab"))?;
    let mut model = Model::new(cfg.model(src.len(), tgt.len()), cfg.train.seed)?;
    let mut opt = OptimizerState::new(&model.store);
    let csv_path = out.join("loss.csv");
    let mut csv = BufWriter::new(fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?);
    writeln!(csv, "{}", StepLog::CSV_HEADER).map_err(|e| io_err(&csv_path, e))?;
    let every = cfg.train.checkpoint_every;
    let logs = train(&mut model, &mut opt, &examples, &cfg.train, |log, m, o| {
        writeln!(csv, "{}", log.csv_row()).map_err(|e| io_err(&csv_path, e))?;
        if every > 0 && log.step % every == 0 {
            checkpoint::save(&out.join(format!("step{:06}.ckpt", log.step)), m, Some(o))?;
        }
        if log.step % 100 == 0 {
            log::info!("step {} loss {:.4}", log.step, log.loss);
        }
        Ok(())
    })?;
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    checkpoint::save(&out.join("final.ckpt"), &model, Some(&opt))?;
    let (label, set) = match &valid {
        Some(v) => ("validation", v.as_slice()),
        None => ("training", examples.as_slice()),
    };
    let loss = evaluate_loss(&model, set, cfg.train.batch_tokens)?;
    println!(
        "steps {}  last batch loss {:.6}  {label} loss {:.6}",
        logs.len(),
        logs.last().map_or(f64::NAN, |l| l.loss),
        loss
    );
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<(), Failure> {
    let ck = checkpoint::read(&a.checkpoint)?;
    let stored = graphmt::config::model_config_from_text(&ck.config)?;
    let cfg = a.cfg.resolve(RunConfig::from_model_config(&stored))?;
    let dir = a.checkpoint.parent().unwrap_or(Path::new("."));
    let src = Vocabulary::load(&cfg.src_vocab.clone().unwrap_or_else(|| dir.join("src.vocab")))?;
    let tgt = Vocabulary::load(&cfg.tgt_vocab.clone().unwrap_or_else(|| dir.join("tgt.vocab")))?;
    let mut model = Model::new(cfg.model(src.len(), tgt.len()), 0)?;
    ck.apply(&mut model.store)?;

    let records: Vec<LoadedRecord> = load_records(&a.input, cfg.feature_dim)?;
    let examples = to_examples(&records, &src, &tgt, &cfg.dataset_options())?;
    cfg.check_examples(&examples)?;
    let mut dump = match &a.dump_json {
        Some(p) => Some((p, BufWriter::new(fs::File::create(p).map_err(|e| io_err(p, e))?))),
        None => None,
    };
    let stdout = io::stdout();
    let mut outw = BufWriter::new(stdout.lock());
    for ex in &examples {
        let max_len = a.max_len.unwrap_or_else(|| default_max_len(ex.graph.num_textual()));
        let ids = match a.beam {
            Some(b) => beam_decode(&model, &ex.graph, b, max_len)?,
            None => greedy_decode(&model, &ex.graph, max_len)?,
        };
        writeln!(outw, "{}", tgt.decode(&ids)).map_err(|e| io_err(Path::new("<stdout>"), e))?;
        if let Some((p, w)) = dump.as_mut() {
            let mut tape = Tape::with_params(&model.store);
            let vars = model.encode(&mut Ctx::eval(&mut tape), &ex.graph)?;
            let out = vars.materialize(&tape);
            let line = serde_json::to_string(&out).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| io_err(p, e))?;
        }
    }
    outw.flush().map_err(|e| io_err(Path::new("<stdout>"), e))?;
    if let Some((p, mut w)) = dump {
        w.flush().map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_evaluate(hyp: &Path, refs: &Path) -> Result<(), Failure> {
    let h = read_lines(hyp)?;
    let r = read_lines(refs)?;
    if h.len() != r.len() {
        return Err(Failure {
            code: 4,
            msg: format!("{} hypothesis lines but {} reference lines", h.len(), r.len()),
        });
    }
    let score = corpus_bleu(&h, &r).map_err(|e| Failure {
        code: 4,
        msg: e.to_string(),
    })?;
    println!("BLEU = {}", format_bleu(score));
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let ablations: Vec<Ablation> = if a.ablation.iter().any(|s| s == "all") {
        Ablation::ALL.to_vec()
    } else if a.ablation.is_empty() {
        vec![Ablation::None]
    } else {
        a.ablation.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let mut worst: Option<(Ablation, String, f64)> = None;
    for ab in ablations {
        let report = run_toy(ab, a.seed, a.step)?;
        println!("{report}");
        let status = if report.passed(a.tolerance) { "PASS" } else { "FAIL" };
        println!("  {status} (tolerance {:e})", a.tolerance);
        if !report.passed(a.tolerance) {
            let w = report.worst().expect("non-empty report");
            if worst.as_ref().map_or(true, |x| w.max_rel_error > x.2) {
                worst = Some((ab, format!("{}[{}]", w.worst_param, w.worst_index), w.max_rel_error));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((ab, name, err)) => Err(Failure {
            code: 1,
            msg: format!("gradient check failed: worst offender {name} ({ab}) rel err {err:.3e}"),
        }),
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let records = load_records(&a.data, a.feature_dim)?;
    let rec = records
        .iter()
        .find(|r| r.line == a.line)
        .ok_or_else(|| Error::Usage(format!("{}: no example on line {}", a.data.display(), a.line)))?;
    let ids: Vec<usize> = (0..rec.src.len()).collect();
    let mode = if a.fully_connected_grounding {
        graphmt::EdgeMode::FullyConnected
    } else {
        graphmt::EdgeMode::Grounded
    };
    let g = build_graph_with(&ids, &rec.groundings, a.feature_dim, mode)
        .map_err(|e| Error::Data(format!("line {}: {e}", a.line)))?;
    println!("textual nodes: {}", g.num_textual());
    println!("visual nodes: {}", g.num_visual());
    println!("inter-modal edges: {}", g.edges().len());
    for (t, o) in g.edges() {
        println!("  x{t} -- o{o}");
    }
    for (t, tok) in rec.src.iter().enumerate() {
        let n = g.neighbors_visual(t)?;
        let list: Vec<String> = n.iter().map(|o| format!("o{o}")).collect();
        println!("  x{t} {tok}: {{{}}}", list.join(", "));
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve(RunConfig::default())?;
    let model = Model::new(cfg.model(a.src_vocab_size, a.tgt_vocab_size), 0)?;
    println!("{}", model.param_report());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        pairs: a.pairs,
        seed: a.seed,
        feature_dim: a.feature_dim,
        ..SyntheticSpec::default()
    };
    let path = generate(&spec)?.write(&a.out, &a.name)?;
    println!("{}", path.display());
    Ok(())
}

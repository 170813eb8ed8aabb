use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trialsum_core::api::{
    checkpoint_file, load_engine, to_json, DecodeOverrides, Engine, EngineConfig, InfillRequest, InfillResponse,
    QueryBody, SearchHit, SearchRequest, SummarizeRequest, SummarizeResponse, DEFAULT_CACHE_SIZE,
};
use trialsum_core::decoding::DecodeConfig;
use trialsum_core::evaluation::evaluate_split;
use trialsum_core::model::checkpoint;
use trialsum_core::model::gradcheck::{gradient_check, random_example};
use trialsum_core::model::train::{train, TrainConfig};
use trialsum_core::model::{Architecture, Model, ModelConfig};
use trialsum_core::pipeline::{build_vocabulary, tokenize_examples, toy_config};
use trialsum_core::synth::{generate, read_corpus, write_corpus, SynthSpec};
use trialsum_core::templates::TemplateCatalog;

type Error = Box<dyn std::error::Error>;

macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout().lock(), $($arg)*)?
    }};
}

#[derive(Parser)]
#[command(name = "trialsum", version, about = "Search, summarize and in-fill clinical trial evidence")]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, env = "TRIALSUM_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (trials.jsonl and targets.jsonl).
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        topics: usize,
        #[arg(long, default_value_t = 5)]
        trials_per_topic: usize,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Validate a trials file and report the record count.
    IngestCheck {
        #[arg(long, default_value = "trials.jsonl")]
        trials: PathBuf,
    },
    /// Train a model on a corpus directory and write a checkpoint.
    Train(TrainArgs),
    /// Decode a corpus split and report ROUGE-L and directionality.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Rank trials matching a query.
    Search {
        #[command(flatten)]
        query: QueryArgs,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Summarize trials chosen by id or by query.
    Summarize {
        #[arg(long, default_value = "multihead")]
        model: Architecture,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Fill a direction template from trials chosen by id or by query.
    Infill {
        #[arg(long)]
        template: String,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Compare analytic and finite-difference gradients on a random tiny model.
    Gradcheck {
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 240)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long, env = "TRIALSUM_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, env = "TRIALSUM_PORT", default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small model and fast schedule for the synthetic corpus.
    Toy,
    /// Full-size model with the fine-tuning schedule.
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "multihead")]
    arch: Architecture,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long, default_value = ".")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    target_loss: Option<f64>,
    /// Checkpoint path; defaults to `<arch>.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long = "population")]
    population: Vec<String>,
    #[arg(long = "intervention")]
    intervention: Vec<String>,
    #[arg(long = "outcome")]
    outcome: Vec<String>,
    #[arg(short, long)]
    k: Option<usize>,
}

impl QueryArgs {
    fn body(&self) -> QueryBody {
        QueryBody {
            population: self.population.clone(),
            intervention: self.intervention.clone(),
            outcome: self.outcome.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        self.population.is_empty() && self.intervention.is_empty() && self.outcome.is_empty()
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Comma-separated trial ids.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[command(flatten)]
    query: QueryArgs,
}

impl SelectArgs {
    fn split(&self) -> (Option<Vec<String>>, Option<QueryBody>, Option<usize>) {
        let ids = (!self.ids.is_empty()).then(|| self.ids.clone());
        let query = (!self.query.is_empty()).then(|| self.query.body());
        (ids, query, self.query.k)
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl DecodeArgs {
    fn overrides(&self) -> Option<DecodeOverrides> {
        let o = DecodeOverrides {
            beam_size: self.beam_size,
            min_len: self.min_len,
            max_len: self.max_len,
            alpha: self.alpha,
        };
        (o != DecodeOverrides::default()).then_some(o)
    }
}

#[derive(Args)]
struct EngineArgs {
    /// Trials file; defaults to trials.jsonl.
    #[arg(long, env = "TRIALSUM_TRIALS")]
    trials: Option<PathBuf>,
    /// Checkpoint to load (repeatable); defaults to any `<arch>.ckpt` present.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long, env = "TRIALSUM_CACHE_SIZE", default_value_t = DEFAULT_CACHE_SIZE)]
    cache_size: usize,
}

impl EngineArgs {
    fn load(&self, data_dir: &Path) -> Result<Engine, Error> {
        let mut cfg = EngineConfig::new(data_dir);
        cfg.trials = self.trials.clone();
        cfg.checkpoints = self.checkpoints.clone();
        cfg.cache_size = self.cache_size;
        Ok(load_engine(&cfg)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let dir = cli.data_dir.as_path();
    match cli.command {
        Command::GenCorpus {
            seed,
            topics,
            trials_per_topic,
            out,
        } => {
            let examples = generate(&SynthSpec::new(seed, topics, trials_per_topic))?;
            let out = dir.join(out);
            write_corpus(&out, &examples)?;
            let n_records: usize = examples.iter().map(|e| e.records.len()).sum();
            if cli.json {
                out!(
                    "{}",
                    to_json(&serde_json::json!({"topics": examples.len(), "records": n_records, "dir": out}))
                );
            } else {
                out!("wrote {} topics and {n_records} trials to {}", examples.len(), out.display());
            }
        }
        Command::IngestCheck { trials } => {
            let (_, n) = trialsum_core::store::TrialStore::ingest(dir.join(&trials))?;
            if cli.json {
                out!("{}", to_json(&serde_json::json!({ "records": n })));
            } else {
                out!("{n} records ok");
            }
        }
        Command::Train(args) => train_cmd(dir, cli.json, args)?,
        Command::Eval {
            checkpoint: ckpt,
            corpus,
            split,
            decode,
        } => {
            let (model, vocab) = checkpoint::load(dir.join(ckpt))?;
            let examples = read_corpus(dir.join(corpus))?;
            let cfg = decode.overrides().unwrap_or_default().apply(DecodeConfig::default());
            let report = evaluate_split(&model, &vocab, &examples, &cfg, &split)?;
            if cli.json {
                out!("{}", to_json(&report));
            } else {
                {
                use std::io::Write as _;
                write!(std::io::stdout().lock(), "{}", report.table())?
            }
            }
        }
        Command::Search { query, engine } => {
            let engine = engine.load(dir)?;
            let body = engine.search(&SearchRequest {
                query: query.body(),
                k: query.k,
            })?;
            if cli.json {
                out!("{body}");
            } else {
                let hits: Vec<SearchHit> = serde_json::from_str(&body)?;
                for (i, h) in hits.iter().enumerate() {
                    out!("{:>2}. {}  score={:.2}  {}", i + 1, h.id, h.score, h.title);
                }
            }
        }
        Command::Summarize {
            model,
            select,
            decode,
            engine,
        } => {
            let engine = engine.load(dir)?;
            let (trial_ids, query, k) = select.split();
            let body = engine.summarize(&SummarizeRequest {
                trial_ids,
                query,
                k,
                model,
                decode: decode.overrides(),
            })?;
            if cli.json {
                out!("{body}");
            } else {
                let r: SummarizeResponse = serde_json::from_str(&body)?;
                out!("{}\n\ntrials: {}\n{}", r.summary, r.trial_ids.join(", "), r.warning);
            }
        }
        Command::Infill {
            template,
            select,
            engine,
        } => {
            let engine = engine.load(dir)?;
            let (trial_ids, query, k) = select.split();
            let body = engine.infill(&InfillRequest {
                template_id: template,
                trial_ids,
                query,
                k,
            })?;
            if cli.json {
                out!("{body}");
            } else {
                let r: InfillResponse = serde_json::from_str(&body)?;
                out!("{}\n\ntrials: {}\n{}", r.summary, r.trial_ids.join(", "), r.warning);
            }
        }
        Command::Gradcheck {
            arch,
            seed,
            samples,
            lambda,
        } => {
            let archs = match arch {
                Some(a) => vec![a],
                None => vec![Architecture::Baseline, Architecture::Multihead],
            };
            let mut ok = true;
            let mut rows = Vec::new();
            for a in archs {
                let cfg = ModelConfig::tiny(a, 20);
                let model = Model::<f64>::new(cfg.clone(), seed)?;
                let ex = random_example(&cfg, 5, seed);
                let r = gradient_check(&model, &ex, lambda, samples, seed)?;
                let pass = r.max_rel_error < 1e-4;
                ok &= pass;
                if cli.json {
                    rows.push(serde_json::json!({
                        "architecture": a,
                        "coordinates": r.coordinates.len(),
                        "max_rel_error": r.max_rel_error,
                        "pass": pass,
                    }));
                } else {
                    out!(
                        "{a}: max relative error {:.3e} over {} coordinates  {}",
                        r.max_rel_error,
                        r.coordinates.len(),
                        if pass { "PASS" } else { "FAIL" }
                    );
                }
            }
            if cli.json {
                out!("{}", to_json(&rows));
            }
            if !ok {
                eprintln!("error: gradient check exceeded 1e-4");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve { host, port, engine } => {
            let engine = engine.load(dir)?;
            trialsum_server::run(engine, SocketAddr::new(host, port))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(dir: &Path, json: bool, a: TrainArgs) -> Result<(), Error> {
    let examples = read_corpus(dir.join(&a.corpus))?;
    let vocab = build_vocabulary(&examples, &TemplateCatalog::builtin())?;
    let (model_cfg, mut train_cfg) = match a.preset {
        Preset::Toy => (toy_config(a.arch, vocab.len()), TrainConfig::toy()),
        Preset::Full => (ModelConfig::new(a.arch, vocab.len()), TrainConfig::default()),
    };
    train_cfg.seed = a.seed;
    if let Some(v) = a.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = a.lambda {
        train_cfg.lambda = v;
    }
    if a.target_loss.is_some() {
        train_cfg.target_loss = a.target_loss;
    }
    let data = tokenize_examples(&examples, &vocab, &model_cfg)?;
    let mut model = Model::<f32>::new(model_cfg, a.seed)?;
    let report = train(&mut model, &data, &train_cfg, |_, _| {})?;
    let out = dir.join(a.out.unwrap_or_else(|| PathBuf::from(checkpoint_file(a.arch))));
    checkpoint::save(&out, &model, &vocab)?;
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    if json {
        out!(
            "{}",
            to_json(&serde_json::json!({
                "architecture": a.arch,
                "epochs": report.epoch_losses.len(),
                "epoch_losses": report.epoch_losses,
                "final_loss": last,
                "checkpoint": out,
            }))
        );
    } else {
        out!(
            "trained {} for {} epochs, final loss {last:.4}; saved {}",
            a.arch,
            report.epoch_losses.len(),
            out.display()
        );
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mas_sentinel::detector::ScoreReport;
use mas_sentinel::embed::EmbedderKind;
use mas_sentinel::encoder::ModelParams;
use mas_sentinel::graph::DialogueGraph;
use mas_sentinel::pipeline::{detect_all, evaluate, load_corpus, save_corpus, simulate_split, train_corpus, PipelineConfig};
use mas_sentinel::render::{render_explanation, token_intensities, RenderFormat};
use mas_sentinel::{Error, Result};

const ENDPOINT_ENV: &str = "SENTINEL_EMBED_ENDPOINT";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (bad flags or arguments)
  3  I/O error (missing or unwritable file)
  4  parse or schema error in an input file
  5  embedding dimension mismatch
  6  embedding service error
  7  invalid input (bad graph, parameter or agent id)

Errors are reported on stderr as one JSON object:
  {\"error\": KIND, \"message\": TEXT, \"exit_code\": CODE}

Environment:
  SENTINEL_EMBED_ENDPOINT  overrides --endpoint";

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Detect and explain malicious agents in multi-agent dialogue graphs", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an unattacked training corpus and an attacked test split.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory; receives train/, test/ and config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train model parameters on a directory of unattacked graphs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; a `<out>.train.json` sidecar is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score graphs and flag the most anomalous agents.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of graph files.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Individual graph files.
        graphs: Vec<PathBuf>,
        /// Agents flagged per graph [default: 3]
        #[arg(long)]
        budget: Option<usize>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render token explanations of a detect report.
    Explain {
        /// A report file written by `detect`.
        report: PathBuf,
        #[arg(long, value_enum, default_value = "ansi")]
        format: Format,
        /// Only render the report of this graph.
        #[arg(long)]
        graph: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Agents flagged per graph [default: 3]
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON file with `embedder`, `train`, `corpus`, `test_split`, `propagation` and `budget` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the corpus, training and propagation seeds; the test split uses seed + 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    embedder: Option<EmbedderArg>,
    #[arg(long)]
    dim: Option<usize>,
    /// Base URL of a remote embedding service.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderArg {
    Hashing,
    Remote,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Ansi,
    Html,
    Json,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.corpus.seed = seed;
            cfg.train.seed = seed;
            cfg.propagation.seed = seed;
            cfg.test_split.seed = seed.wrapping_add(1);
        }
        if let Some(kind) = self.embedder {
            cfg.embedder.kind = match kind {
                EmbedderArg::Hashing => EmbedderKind::Hashing,
                EmbedderArg::Remote => EmbedderKind::Remote,
            };
        }
        if let Some(dim) = self.dim {
            cfg.embedder.dim = dim;
        }
        let env_endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty());
        if let Some(endpoint) = env_endpoint.or_else(|| self.endpoint.clone()) {
            cfg.embedder.endpoint = Some(endpoint);
        }
        if cfg.embedder.kind == EmbedderKind::Hashing {
            cfg.embedder.endpoint = None;
        }
        cfg.embedder.validate()?;
        Ok(cfg)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable output");
    text.push('\n');
    text
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".train.json");
    PathBuf::from(name)
}

fn load_reports(path: &Path) -> Result<Vec<ScoreReport>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let schema = |e: serde_json::Error| Error::Schema {
        field: "report".into(),
        message: e.to_string(),
    };
    if value.is_array() {
        serde_json::from_value(value).map_err(schema)
    } else {
        serde_json::from_value(value).map(|r| vec![r]).map_err(schema)
    }
}

#[derive(Serialize)]
struct TokenScore<'a> {
    token: &'a str,
    score: f64,
    intensity: f64,
}

#[derive(Serialize)]
struct AgentExplanation<'a> {
    agent: usize,
    score: f64,
    tokens: Vec<TokenScore<'a>>,
}

#[derive(Serialize)]
struct GraphExplanation<'a> {
    graph_id: &'a str,
    agents: Vec<AgentExplanation<'a>>,
}

fn explain_json(reports: &[ScoreReport]) -> String {
    let graphs: Vec<GraphExplanation> = reports
        .iter()
        .map(|r| GraphExplanation {
            graph_id: &r.graph_id,
            agents: r
                .flagged
                .iter()
                .map(|&a| AgentExplanation {
                    agent: a,
                    score: r.fused[a],
                    tokens: r.tokens[a]
                        .iter()
                        .zip(&r.token_expl[a])
                        .zip(token_intensities(&r.token_expl[a]))
                        .map(|((token, &score), intensity)| TokenScore { token, score, intensity })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    to_json(&graphs)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, out } => {
            let cfg = common.resolve()?;
            let (train, test) = simulate_split(&cfg)?;
            save_corpus(out.join("train"), &train)?;
            save_corpus(out.join("test"), &test)?;
            let cfg_path = out.join("config.json");
            fs::write(&cfg_path, to_json(&cfg)).map_err(|e| io_error(&cfg_path, e))
        }
        Command::Train { common, corpus, out } => {
            let cfg = common.resolve()?;
            let graphs = load_corpus(&corpus)?;
            let (params, _, sidecar) = train_corpus(&graphs, &cfg)?;
            params.save(&out)?;
            let side = sidecar_path(&out);
            fs::write(&side, to_json(&sidecar)).map_err(|e| io_error(&side, e))
        }
        Command::Detect {
            common,
            checkpoint,
            corpus,
            graphs,
            budget,
            out,
        } => {
            let cfg = common.resolve()?;
            let mut inputs = match &corpus {
                Some(dir) => load_corpus(dir)?,
                None => Vec::new(),
            };
            for path in &graphs {
                inputs.push(DialogueGraph::load(path)?);
            }
            if inputs.is_empty() {
                return Err(Error::InsufficientData("no graphs given; use --corpus or graph files".into()));
            }
            let params = ModelParams::load(&checkpoint)?;
            let reports = detect_all(&inputs, &cfg.embedder, &params, budget.unwrap_or(cfg.budget))?;
            write_output(out.as_deref(), &to_json(&reports))
        }
        Command::Explain {
            report,
            format,
            graph,
            out,
        } => {
            let mut reports = load_reports(&report)?;
            if let Some(id) = &graph {
                reports.retain(|r| &r.graph_id == id);
                if reports.is_empty() {
                    return Err(Error::InvalidParam(format!("no report for graph `{id}`")));
                }
            }
            let text = match format {
                Format::Json => explain_json(&reports),
                Format::Ansi => reports
                    .iter()
                    .map(|r| render_explanation(r, RenderFormat::Ansi))
                    .collect::<Result<Vec<_>>>()?
                    .join("\n"),
                Format::Html => match reports.as_slice() {
                    [single] => render_explanation(single, RenderFormat::Html)?,
                    _ => {
                        return Err(Error::InvalidParam(format!(
                            "{} reports; select one with --graph for HTML output",
                            reports.len()
                        )))
                    }
                },
            };
            write_output(out.as_deref(), &text)
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            budget,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = budget {
                cfg.budget = b;
            }
            let graphs = load_corpus(&corpus)?;
            let params = ModelParams::load(&checkpoint)?;
            let summary = evaluate(&graphs, &params, &cfg)?;
            let mut text = summary.to_json_string();
            text.push('\n');
            write_output(out.as_deref(), &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            let report = serde_json::json!({
                "error": err.kind(),
                "message": err.to_string(),
                "exit_code": code,
            });
            eprintln!("{report}");
            ExitCode::from(code as u8)
        }
    }
}

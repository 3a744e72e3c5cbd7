use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use recast::annotation::AnnotationStore;
use recast::pipeline::{self, artifacts, read_id_list, RunOptions, Workspace};

#[derive(Parser)]
#[command(name = "recast", version, about = "Retrieval-assisted counterfactual editing pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Output file instead of the command's default artifact.
    #[arg(long)]
    out: Option<PathBuf>,
    /// File of example ids (one per line) to restrict the run to.
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate inputs and build training triplets.
    Ingest,
    /// Embed corpus, triplet and query texts into the cache.
    Embed(Common),
    /// Train the query and document projection heads.
    TrainRetriever(Common),
    /// Index the projected corpus.
    BuildIndex(Common),
    /// Write top-k retrieved documents per example.
    Retrieve(Common),
    /// Train the pair scorer used for reranking.
    TrainReranker,
    /// Produce counterfactual records.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Use the top retrieved document as the edit, without the editor.
        #[arg(long)]
        retrieved_only: bool,
    },
    /// Compute intrinsic metrics and the token bias table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Records to evaluate instead of the generation output.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Extra records whose stage summary joins the report.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Serve the annotation API.
    ServeAnnotate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn options(c: &Common) -> anyhow::Result<RunOptions> {
    let subset = match &c.subset {
        Some(p) => Some(read_id_list(p)?),
        None => None,
    };
    Ok(RunOptions {
        threads: c.threads,
        out: c.out.clone(),
        subset,
        ..RunOptions::default()
    })
}

fn serve_annotate(ws: &Workspace, opts: &RunOptions, host: &str, port: u16) -> anyhow::Result<()> {
    let cfg = ws.config();
    let pool = pipeline::annotation_pool(ws, opts)?;
    let journal = ws.path(artifacts::JOURNAL);
    let store = AnnotationStore::open(pool, &journal, Duration::from_secs(cfg.annotation.claim_timeout_secs))?;
    let open = store.tasks().len() - store.submissions().len();
    let static_dir = cfg.annotation.static_dir.as_deref().map(|p| ws.loaded.resolve(p));
    let app = recast_cli::server::router(store, static_dir);

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        println!(
            "serving annotation API on http://{} ({open} open tasks, journal {})",
            listener.local_addr()?,
            journal.display()
        );
        recast_cli::server::serve(listener, app).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut ws = Workspace::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        ws.loaded.config.seed = seed;
    }
    match cli.command {
        Command::Ingest => {
            let s = pipeline::ingest(&ws)?;
            println!(
                "ingested {} examples, {} documents, {} triplets ({} seed pairs rejected, {} without paraphrase)",
                s.examples, s.documents, s.triplets, s.rejected_pairs, s.missing_paraphrases
            );
        }
        Command::Embed(c) => {
            let n = pipeline::embed(&ws, &options(&c)?)?;
            println!("embedding cache holds {n} texts");
        }
        Command::TrainRetriever(c) => {
            let log = pipeline::train_retriever(&ws, &options(&c)?)?;
            if let Some(last) = log.last() {
                match last.eval_top1 {
                    Some(acc) => println!("epoch {}: mean loss {:.6}, top-1 {acc:.3}", last.epoch, last.mean_loss),
                    None => println!("epoch {}: mean loss {:.6}", last.epoch, last.mean_loss),
                }
            }
        }
        Command::BuildIndex(c) => {
            let index = pipeline::build_index(&ws, &options(&c)?)?;
            println!("indexed {} documents of dimension {}", index.len(), index.dimension());
        }
        Command::Retrieve(c) => {
            let out = pipeline::retrieve(&ws, &options(&c)?)?;
            println!("wrote {}", out.display());
        }
        Command::TrainReranker => {
            pipeline::train_reranker(&ws)?;
            println!("wrote {}", ws.path(artifacts::SCORER).display());
        }
        Command::Generate { common, retrieved_only } => {
            let opts = options(&common)?;
            let s = if retrieved_only {
                pipeline::generate_retrieved_only(&ws, &opts)?
            } else {
                pipeline::generate(&ws, &opts)?
            };
            let stages: Vec<String> = s.by_stage.iter().map(|(k, v)| format!("{k:?}={v}")).collect();
            println!(
                "wrote {} records to {} ({}), {} failures",
                s.records,
                s.output.display(),
                stages.join(", "),
                s.failures
            );
        }
        Command::Evaluate { common, input, baseline } => {
            let opts = RunOptions {
                input,
                baseline,
                ..options(&common)?
            };
            let eval = pipeline::evaluate(&ws, &opts)?;
            print!("{}", eval.report.to_text_table());
            if let Some(Err(msg)) = &eval.ordering {
                eprintln!("warning: intrinsic ordering violated: {msg}");
            }
        }
        Command::ServeAnnotate { common, port, host } => serve_annotate(&ws, &options(&common)?, &host, port)?,
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}

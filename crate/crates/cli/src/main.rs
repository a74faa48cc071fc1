use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context};
use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand};

use prefviz_cli::{aggregate, default_out_root, default_run_dir, load_config, load_run, write_series};
use prefviz_core::env::EnvKind;
use prefviz_core::orchestrator::{Feedback, Method, Run, RunConfig};
use prefviz_server::{router, serve, session, SystemClock};

const EXIT_PORT_IN_USE: u8 = 3;

#[derive(Parser)]
#[command(name = "prefviz", version, about = "Reward learning from cluster rankings over a 2D state map")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its run directory.
    Run(RunArgs),
    /// Average records.csv across seeds into series.csv.
    Aggregate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for series.csv (defaults to $PREFVIZ_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a live-feedback experiment behind the labeling HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        run_config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Built UI assets to serve at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_parser = env_parser())]
    env: Option<EnvKind>,
    #[arg(long)]
    feedback: Option<Feedback>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Run directory (defaults to $PREFVIZ_OUT/<method>-<env>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Port for the labeling API when feedback is live.
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn env_parser() -> impl clap::builder::TypedValueParser<Value = EnvKind> {
    clap::builder::PossibleValuesParser::new(EnvKind::ALL.map(EnvKind::name))
        .map(|s| s.parse::<EnvKind>().expect("only listed names pass"))
}

#[derive(Debug, thiserror::Error)]
#[error("cannot listen on {addr}: {source}")]
struct BindError {
    addr: String,
    source: std::io::Error,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<BindError>().is_some() {
                ExitCode::from(EXIT_PORT_IN_USE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Run(args) => run(args),
        Cmd::Aggregate { runs, out } => {
            let loaded = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
            let series = aggregate(&loaded)?;
            let dir = out.unwrap_or_else(default_out_root);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("series.csv");
            write_series(&path, &series)?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::Serve { port, host, run_config, out, ui_dir } => {
            let cfg = load_config(&run_config)?;
            if cfg.feedback != Feedback::Live {
                bail!("serve needs \"feedback\": \"live\" in {}", run_config.display());
            }
            let dir = out.unwrap_or_else(|| default_run_dir(&default_out_root(), &cfg));
            serve_live(cfg, &dir, &host, port, ui_dir)
        }
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(e) = args.env {
        cfg.env = e;
    }
    if let Some(f) = args.feedback {
        cfg.feedback = f;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.iterations {
        cfg.iterations = k;
    }
    cfg.validate()?;
    let dir = args.out.unwrap_or_else(|| default_run_dir(&default_out_root(), &cfg));
    if cfg.feedback == Feedback::Live {
        return serve_live(cfg, &dir, "127.0.0.1", args.port, None);
    }
    let out = Run::new(cfg, Some(&dir))?.run()?;
    if let Some(last) = out.records.last() {
        println!(
            "{}: iteration {} human {:.0}s reward {:.3} +- {:.3}",
            dir.display(),
            last.iteration,
            last.human_seconds,
            last.mean_reward,
            last.sem
        );
    }
    Ok(())
}

fn serve_live(cfg: RunConfig, dir: &Path, host: &str, port: u16, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    cfg.validate()?;
    let rt = tokio::runtime::Runtime::new()?;
    let addr = format!("{host}:{port}");
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(&addr))
        .map_err(|source| BindError { addr: addr.clone(), source })?;
    let local: SocketAddr = listener.local_addr()?;
    log::info!("labeling session on http://{local}");

    let (sess, mut labeler) = session(SystemClock::new());
    let dir = dir.to_path_buf();
    let worker = thread::spawn(move || Run::new(cfg, Some(&dir))?.with_labeler(&mut labeler).run());

    let app = router(sess.clone(), ui_dir);
    rt.block_on(async move {
        serve(listener, app, async move {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
            sess.abort();
        })
        .await
    })?;
    let outcome = worker.join().map_err(|_| anyhow::anyhow!("training thread panicked"))??;
    if !outcome.completed {
        log::warn!("run halted after {} records", outcome.records.len());
    }
    Ok(())
}

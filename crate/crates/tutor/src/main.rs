use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use mlq_core::bank::{load_bank, TemplateBank};
use mlq_core::nn::{load_checkpoint, Solver};
use mlq_tutor::{router, Tutor};

#[derive(Parser)]
#[command(
    name = "mlq-tutor",
    version,
    about = "Serve tutoring sessions over HTTP"
)]
struct Config {
    #[arg(long, env = "MLQ_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "MLQ_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Checkpoint for `/solve`; without one that endpoint answers 503.
    #[arg(long, env = "MLQ_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Bank JSON; the built-in bank when omitted.
    #[arg(long, env = "MLQ_BANK")]
    bank: Option<PathBuf>,
    /// Directory of the session event log; sessions are kept in memory only
    /// when omitted.
    #[arg(long, env = "MLQ_LOG_DIR")]
    log_dir: Option<PathBuf>,
}

fn build(config: &Config) -> Result<Tutor, String> {
    let bank = match &config.bank {
        Some(p) => load_bank(p).map_err(|e| e.to_string())?,
        None => TemplateBank::default_bank(),
    };
    let solver = match &config.checkpoint {
        Some(p) => Some(Solver::new(
            load_checkpoint(p)
                .map_err(|e| format!("{}: {e}", p.display()))?
                .0,
        )),
        None => None,
    };
    match &config.log_dir {
        Some(dir) => Tutor::with_log(bank, solver, dir).map_err(|e| e.to_string()),
        None => Ok(Tutor::new(bank, solver)),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let config = Config::parse();
    let tutor = match build(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let addr: SocketAddr = match format!("{}:{}", config.host, config.port).parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: bad address: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {addr}: {e}");
            return ExitCode::from(2);
        }
    };
    tracing::info!(%addr, sessions = tutor.session_count(), "listening");
    if let Err(e) = axum::serve(listener, router(Arc::new(tutor))).await {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

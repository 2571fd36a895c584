use std::path::PathBuf;

use clap::Parser;
use kpr_server::{serve, ServeOptions};

#[derive(Parser)]
#[command(name = "kpr-server", about = "Serve prompted embeddings and gallery retrieval over HTTP")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Trained checkpoint (.safetensors).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory holding the persisted gallery index; builds are written here.
    #[arg(long)]
    index: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    serve(ServeOptions { host: a.host, port: a.port, checkpoint: a.checkpoint, index: a.index }).await
}

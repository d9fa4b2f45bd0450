use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use softspread_service::{router, ServiceConfig, SessionStore};

#[derive(Debug, Parser)]
#[command(name = "softspread-service", about = "Serve live soft-label annotation sessions over HTTP")]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// TOML file with capacity limits and storage directories.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    let config = match &args.config {
        Some(path) => ServiceConfig::load(path).unwrap_or_else(|e| fail(&e)),
        None => ServiceConfig::default(),
    };
    let store = SessionStore::open(config).unwrap_or_else(|e| fail(&e));
    let restored = store.len();
    let addr = SocketAddr::new(args.bind, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .unwrap_or_else(|e| fail(&format!("cannot bind {addr}: {e}")));
    eprintln!("listening on {addr} ({restored} sessions restored)");
    let app = router(Arc::new(store));
    if let Err(e) = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    {
        fail(&e.to_string());
    }
}

fn fail(message: &str) -> ! {
    eprintln!("error: {message}");
    std::process::exit(1);
}

use std::net::SocketAddr;

use dragtext_core::backend::BackendRegistry;
use dragtext_service::{router, AppState, ServiceConfig};

#[tokio::main]
async fn main() {
    let config = match ServiceConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("dragtext-service: {e}");
            std::process::exit(2);
        }
    };
    let state = match AppState::new(&config, &BackendRegistry::new()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("dragtext-service: {e}");
            std::process::exit(3);
        }
    };
    let addr: SocketAddr = std::env::var("DRAGTEXT_ADDR")
        .unwrap_or_else(|_| "127.0.0.1:8080".into())
        .parse()
        .expect("DRAGTEXT_ADDR must be host:port");
    let listener = tokio::net::TcpListener::bind(addr).await.expect("bind listen address");
    eprintln!("dragtext-service listening on {addr} (backend {})", config.backend);
    axum::serve(listener, router(state)).await.expect("server error");
}

use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;

use semcolor::cli::{self, Cli, Command, Failure, ServeArgs};
use semcolor::service::{router, AppState};

fn serve(args: &ServeArgs) -> Result<(), Failure> {
    cli::check_bind(args)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Pipeline(e.into()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .map_err(|e| Failure::Config(e.into()))?;
        log::info!("listening on http://{}", args.addr);
        let app = router(
            Arc::new(AppState::new(args.max_sessions)),
            args.static_dir.clone(),
        );
        axum::serve(listener, app)
            .await
            .map_err(|e| Failure::Pipeline(e.into()))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Colorize(a) => cli::colorize(a),
        Command::Bench(a) => cli::bench(a),
        Command::Segment(a) => cli::segment(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

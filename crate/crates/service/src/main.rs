use clap::Parser;
use ems_service::{serve, ServeArgs};

#[derive(Parser)]
#[command(name = "ems-service", version, about = "EMS emulator HTTP service")]
struct Cli {
    #[command(flatten)]
    serve: ServeArgs,
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let cfg = match cli.serve.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ems-service: {e}");
            std::process::exit(2);
        }
    };
    if let Err(e) = serve(cfg).await {
        eprintln!("ems-service: {e}");
        std::process::exit(1);
    }
}

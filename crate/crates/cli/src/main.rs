use clap::Parser;

fn main() {
    let cli = cocobot_cli::Cli::parse();
    if let Err(e) = cocobot_cli::run(cli) {
        eprintln!("error: {}", e.msg);
        std::process::exit(e.code);
    }
}

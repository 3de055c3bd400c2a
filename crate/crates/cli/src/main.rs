use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    if argv.iter().skip(1).any(|a| a == "-h" || a == "--help" || a == "-V" || a == "--version") {
        // let clap print help and version itself
        use clap::Parser;
        let _ = codebias_cli::Cli::parse_from(&argv);
    }
    match codebias_cli::run_cli(argv) {
        Ok(dir) => {
            eprintln!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

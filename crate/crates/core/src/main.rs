use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match synthcomp::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                synthcomp::pipeline::exit::INPUT
            } else {
                0
            });
        }
    };
    ExitCode::from(synthcomp::cli::run(cli))
}

use clap::Parser;
use scoreforge_cli::{Cli, CliError};

/// Only the CPU backend exists; anything else in SCOREFORGE_DEVICE is a
/// configuration error.
fn check_device() -> Result<(), CliError> {
    match std::env::var("SCOREFORGE_DEVICE") {
        Err(_) => Ok(()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(CliError::Usage(format!(
            "SCOREFORGE_DEVICE={v} is not supported; this build runs on cpu only"
        ))),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };

    let result = check_device().and_then(|_| scoreforge_cli::run(cli));
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

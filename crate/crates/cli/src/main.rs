use std::process::ExitCode;

use diffcap_cli::commands::Handled;

fn main() -> ExitCode {
    match diffcap_cli::run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Handled>().is_some() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(diffcap_cli::exit_code(&e) as u8)
        }
    }
}

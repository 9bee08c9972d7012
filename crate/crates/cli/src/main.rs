use std::process::ExitCode;

fn main() -> ExitCode {
    match uie_cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", uie_cli::error_line(&err));
            ExitCode::FAILURE
        }
    }
}

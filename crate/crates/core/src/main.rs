use std::process::ExitCode;

fn main() -> ExitCode {
    swapdistill::cli::run(std::env::args_os())
}

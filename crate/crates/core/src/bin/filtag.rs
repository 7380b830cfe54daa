use std::process::ExitCode;

fn main() -> ExitCode {
    filtag::cli::init_logging();
    filtag::cli::main_with_args(std::env::args_os())
}

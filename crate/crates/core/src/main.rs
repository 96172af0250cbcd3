use std::process::ExitCode;

fn main() -> ExitCode {
    proface::cli::main_with_args(std::env::args_os())
}

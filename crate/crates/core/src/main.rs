use std::process::ExitCode;

fn main() -> ExitCode {
    placelab::cli::main_with_args(std::env::args_os())
}

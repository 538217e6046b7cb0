use std::process::ExitCode;

fn main() -> ExitCode {
    extract_aggregate::cli::main_with_args(std::env::args_os())
}

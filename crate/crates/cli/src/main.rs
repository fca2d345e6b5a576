use std::process::ExitCode;

fn main() -> ExitCode {
    homotopy_da_cli::main_with_args(std::env::args_os())
}

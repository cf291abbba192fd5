use std::process::ExitCode;

fn main() -> ExitCode {
    gqa_core::cli::main_entry()
}

use std::process::ExitCode;

fn main() -> ExitCode {
    saferl::cli::run()
}

use std::process::ExitCode;

fn main() -> ExitCode {
    let code = svfuse::cli::cli_main(std::env::args());
    ExitCode::from(code as u8)
}

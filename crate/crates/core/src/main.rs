use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(tsfm_lens::cli::run() as u8)
}

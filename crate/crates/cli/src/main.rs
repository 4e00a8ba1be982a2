use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(poselik_cli::run(std::env::args_os()))
}

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let mut out = std::io::stdout().lock();
    ExitCode::from(fcvit_core::cli::run(&args, &mut out) as u8)
}

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(droploss::run(std::env::args_os(), &mut std::io::stdout()))
}

use std::process::ExitCode;

mod cli;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match cli::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}

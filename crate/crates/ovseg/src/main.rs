use std::process::ExitCode;

fn main() -> ExitCode {
    match ovseg::commands::run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::from(ovseg::error::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

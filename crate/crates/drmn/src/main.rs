//! Binary entry point: parse, dispatch, map errors to exit codes.

fn main() {
    if let Err(e) = drmn::cli::run() {
        // one line, machine parsable: "error: <kind>: <message>"
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use std::process::ExitCode;

fn main() -> ExitCode {
    usptrack::cli::main()
}

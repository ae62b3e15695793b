fn main() -> std::process::ExitCode {
    gatekit::cli::main_with_args(std::env::args_os())
}

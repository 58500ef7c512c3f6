fn main() -> std::process::ExitCode {
    acanet_cli::main_with_args(std::env::args_os())
}

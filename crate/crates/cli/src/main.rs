fn main() -> std::process::ExitCode {
    natctl::run_cli(std::env::args_os())
}

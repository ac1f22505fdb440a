fn main() -> std::process::ExitCode {
    lata_cli::run_from_env()
}

fn main() -> std::process::ExitCode {
    palign_service::cli::main()
}

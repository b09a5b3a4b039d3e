fn main() -> std::process::ExitCode {
    hyperadapt::cli::run_main()
}

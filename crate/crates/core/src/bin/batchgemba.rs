fn main() -> std::process::ExitCode {
    batchgemba::cli::run()
}

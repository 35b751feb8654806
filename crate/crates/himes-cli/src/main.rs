fn main() -> std::process::ExitCode {
    himes_cli::run()
}

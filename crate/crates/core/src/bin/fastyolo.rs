fn main() -> std::process::ExitCode {
    fastyolo::cli::main()
}

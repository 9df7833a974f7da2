fn main() -> std::process::ExitCode {
    dfard::cli::main()
}

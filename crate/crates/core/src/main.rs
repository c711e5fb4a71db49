fn main() -> std::process::ExitCode {
    sedtriadv::cli::main()
}

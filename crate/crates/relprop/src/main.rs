fn main() -> std::process::ExitCode {
    relprop::cli::main()
}

fn main() -> std::process::ExitCode {
    ggfl::cli::main()
}

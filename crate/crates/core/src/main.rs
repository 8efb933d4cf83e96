fn main() -> std::process::ExitCode {
    miselbo::cli::main_from_env()
}

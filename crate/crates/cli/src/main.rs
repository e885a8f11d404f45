fn main() -> std::process::ExitCode {
    genie_cli::main_entry()
}

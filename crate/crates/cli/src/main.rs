fn main() -> std::process::ExitCode {
    provwf_cli::cli::main_entry()
}

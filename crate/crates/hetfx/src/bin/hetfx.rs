fn main() -> std::process::ExitCode {
    hetfx::cli::main_entry()
}

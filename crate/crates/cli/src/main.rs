fn main() {
    std::process::exit(motif_cli::run_command(std::env::args_os()));
}

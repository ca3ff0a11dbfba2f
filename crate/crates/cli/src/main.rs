fn main() {
    std::process::exit(latentfuzz_cli::run_command(std::env::args_os()));
}

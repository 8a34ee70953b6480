fn main() {
    std::process::exit(tailrisk_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(goalign_cli::run(std::env::args_os()));
}

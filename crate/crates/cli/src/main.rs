fn main() {
    std::process::exit(stagematch_cli::run(std::env::args().collect()));
}

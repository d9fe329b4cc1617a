fn main() {
    std::process::exit(tinylm::cli::run(std::env::args().collect()));
}

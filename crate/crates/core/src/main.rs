fn main() {
    std::process::exit(mapl::cli::run(std::env::args().collect()));
}

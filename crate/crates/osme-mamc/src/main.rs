fn main() {
    std::process::exit(osme_mamc::cli::run());
}

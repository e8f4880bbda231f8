fn main() {
    std::process::exit(imbalance_forge::cli::run(std::env::args_os()));
}

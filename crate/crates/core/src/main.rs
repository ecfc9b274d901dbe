fn main() {
    std::process::exit(vitprune::cli::run(std::env::args_os()));
}

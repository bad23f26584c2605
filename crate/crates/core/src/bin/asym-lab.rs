fn main() {
    std::process::exit(asym_lab::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(traceuq::cli::run(std::env::args_os()));
}

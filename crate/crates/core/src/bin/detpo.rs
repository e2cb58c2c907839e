fn main() {
    std::process::exit(detpo::cli::run(std::env::args_os()));
}

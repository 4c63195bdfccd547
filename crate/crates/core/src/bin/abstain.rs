fn main() {
    std::process::exit(abstention_cascade::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(lexrel::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(stochmor::cli::run(std::env::args_os()));
}

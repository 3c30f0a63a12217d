fn main() {
    std::process::exit(corrfuse::cli::run(std::env::args_os()));
}

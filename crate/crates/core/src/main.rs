fn main() {
    std::process::exit(anchortrack::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(maskvar::cli::run(std::env::args_os()));
}

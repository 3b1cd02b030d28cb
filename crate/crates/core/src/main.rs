fn main() {
    std::process::exit(vqforge::cli::run(std::env::args_os()));
}

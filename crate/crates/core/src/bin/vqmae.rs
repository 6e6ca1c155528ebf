fn main() {
    std::process::exit(vqmae::cli::run(std::env::args_os()));
}

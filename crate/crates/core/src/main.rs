fn main() {
    std::process::exit(fovx::cli::run(std::env::args_os()));
}

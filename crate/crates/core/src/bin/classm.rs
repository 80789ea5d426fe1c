fn main() {
    std::process::exit(classm::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(afd::cli::run(std::env::args_os()));
}

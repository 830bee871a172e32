fn main() {
    std::process::exit(erot::cli::run(std::env::args_os()));
}

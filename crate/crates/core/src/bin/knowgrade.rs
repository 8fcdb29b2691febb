fn main() {
    std::process::exit(knowgrade::cli::run(std::env::args_os()));
}

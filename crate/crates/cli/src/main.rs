fn main() {
    std::process::exit(handlefield_cli::run(std::env::args_os()));
}

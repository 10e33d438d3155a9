fn main() {
    std::process::exit(cause::cli::run(std::env::args_os()));
}

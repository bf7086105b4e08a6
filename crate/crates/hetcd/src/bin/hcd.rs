fn main() {
    std::process::exit(hetcd::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(ecmarket::cli::main_with_args(std::env::args_os()));
}

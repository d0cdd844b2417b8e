fn main() {
    std::process::exit(cxrgen::cli::main_with_args(std::env::args_os()));
}

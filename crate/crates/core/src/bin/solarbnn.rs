fn main() {
    std::process::exit(solarbnn_core::cli::main_with_args(std::env::args_os()));
}

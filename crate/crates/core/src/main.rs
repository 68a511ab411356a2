fn main() {
    std::process::exit(gu_core::cli::main_with_args(std::env::args_os()));
}

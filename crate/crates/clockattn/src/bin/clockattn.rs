fn main() {
    std::process::exit(clockattn::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(hybridnet::cli::main_with_args(std::env::args_os()));
}

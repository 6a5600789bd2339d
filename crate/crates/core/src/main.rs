fn main() {
    std::process::exit(pcce::cli::main_with_args(std::env::args_os()));
}

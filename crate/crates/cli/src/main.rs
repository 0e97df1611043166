fn main() {
    std::process::exit(geounify_cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(sotlab::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(spotlight::cli::main_with_args(std::env::args_os()));
}

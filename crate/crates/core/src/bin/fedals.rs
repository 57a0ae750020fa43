fn main() {
    std::process::exit(fedals::cli::main_with_args(std::env::args_os()));
}

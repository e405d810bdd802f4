fn main() {
    std::process::exit(omniprune::cli::main_with_args(std::env::args_os()));
}

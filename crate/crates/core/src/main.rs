fn main() {
    std::process::exit(entropy_sums::cli::main_with_args(std::env::args_os()));
}

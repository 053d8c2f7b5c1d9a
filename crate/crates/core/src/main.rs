fn main() {
    std::process::exit(sciflow::cli::run_from_args(std::env::args_os()));
}

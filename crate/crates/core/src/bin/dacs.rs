fn main() {
    std::process::exit(dacs_core::cli::run_from_args(std::env::args_os()));
}

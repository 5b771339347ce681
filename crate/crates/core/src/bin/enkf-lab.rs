fn main() {
    std::process::exit(enkf_lab::cli::run_from_args(std::env::args_os()));
}

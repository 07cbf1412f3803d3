fn main() {
    std::process::exit(semgan_cli::run_from_args(std::env::args_os()));
}

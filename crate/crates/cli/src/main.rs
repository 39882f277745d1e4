fn main() {
    calibrex_cli::init_logging();
    std::process::exit(calibrex_cli::main_with_args(std::env::args_os()));
}

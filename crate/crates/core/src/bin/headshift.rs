fn main() {
    std::process::exit(headshift::cli::run_command(std::env::args_os()));
}

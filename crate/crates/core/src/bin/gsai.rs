fn main() {
    std::process::exit(gsai::cli::run_command(std::env::args_os()));
}

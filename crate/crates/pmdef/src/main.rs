fn main() {
    std::process::exit(pmdef::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(litetrack::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(proxyform::cli::run_cli(std::env::args_os()));
}

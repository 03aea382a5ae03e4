fn main() {
    std::process::exit(epps_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(magnet_cli::run(std::env::args_os()));
}

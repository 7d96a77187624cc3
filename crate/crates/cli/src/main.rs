fn main() {
    std::process::exit(lmdm_cli::run(std::env::args_os()));
}

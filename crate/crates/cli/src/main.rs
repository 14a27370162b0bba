fn main() {
    std::process::exit(granp_cli::run(std::env::args_os()));
}

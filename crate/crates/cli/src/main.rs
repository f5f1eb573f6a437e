fn main() {
    std::process::exit(dtvg_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(r2dl_cli::run(std::env::args_os()));
}

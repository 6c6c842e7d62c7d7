fn main() {
    std::process::exit(ikno_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(rfrlf_cli::run(std::env::args_os()));
}

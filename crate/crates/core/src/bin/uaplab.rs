fn main() {
    std::process::exit(uaplab::cli::run(std::env::args_os()));
}

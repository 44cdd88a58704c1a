fn main() {
    std::process::exit(crosstok::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(ulrseg::cli::run(std::env::args_os()));
}

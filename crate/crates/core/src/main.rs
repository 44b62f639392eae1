fn main() {
    std::process::exit(reasonvec::cli::run(std::env::args_os()));
}

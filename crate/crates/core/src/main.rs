fn main() {
    std::process::exit(mrplab::cli::run(std::env::args_os()));
}

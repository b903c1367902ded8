fn main() {
    std::process::exit(ctxpaste::cli::run(std::env::args_os()));
}

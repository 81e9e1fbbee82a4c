fn main() {
    std::process::exit(tailflow::cli::run(std::env::args_os()));
}

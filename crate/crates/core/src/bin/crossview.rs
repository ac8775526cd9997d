fn main() {
    std::process::exit(crossview::cli::main_with_args(std::env::args_os()));
}

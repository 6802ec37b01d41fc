fn main() {
    std::process::exit(desklab::cli::main_with(std::env::args_os()));
}

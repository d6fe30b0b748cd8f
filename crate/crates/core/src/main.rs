fn main() {
    std::process::exit(unirnnt::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(combinfer::cli::main_with(std::env::args_os()));
}

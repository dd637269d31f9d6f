fn main() {
    std::process::exit(copl_core::cli::run(std::env::args_os()));
}

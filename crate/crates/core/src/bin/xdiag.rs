fn main() {
    std::process::exit(xdiag_core::cli::run(std::env::args_os()));
}

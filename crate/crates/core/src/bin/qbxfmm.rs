fn main() {
    std::process::exit(qbxfmm::cli::main_with_args(std::env::args_os()));
}

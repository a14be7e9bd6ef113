fn main() {
    std::process::exit(mmlab::harness::cli::main_with_args(std::env::args_os()));
}

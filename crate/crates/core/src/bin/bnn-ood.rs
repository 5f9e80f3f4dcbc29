fn main() {
    std::process::exit(bnn_ood::cli::main_with_args(std::env::args_os()));
}

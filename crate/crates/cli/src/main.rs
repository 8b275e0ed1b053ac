fn main() {
    std::process::exit(alignflow_cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(unode_cli::cli::main_with_args(std::env::args_os()));
}

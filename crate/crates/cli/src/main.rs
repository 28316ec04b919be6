fn main() {
    std::process::exit(lungseg_cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(xmadapter::cli::main_with_args(std::env::args_os()));
}

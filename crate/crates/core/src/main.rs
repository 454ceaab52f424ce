fn main() {
    std::process::exit(eeprobe::cli::main_with_args(std::env::args_os()));
}

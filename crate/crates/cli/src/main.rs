fn main() {
    std::process::exit(reconbench_cli::main_with_args(std::env::args_os()));
}

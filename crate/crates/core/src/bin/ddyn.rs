fn main() {
    std::process::exit(distill_dynamics::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(dp_linreg::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(ldct_core::cli::main_with_args(std::env::args_os()));
}

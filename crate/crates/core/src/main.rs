fn main() {
    std::process::exit(corml::cli::main_with_args(std::env::args_os()));
}

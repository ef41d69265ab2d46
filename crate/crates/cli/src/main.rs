fn main() {
    std::process::exit(rvm_cli::run_from(std::env::args_os()));
}

fn main() {
    std::process::exit(rtlrag::cli::run(std::env::args_os()));
}

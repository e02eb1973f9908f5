fn main() {
    std::process::exit(fha_lab::cli::run(std::env::args_os()));
}

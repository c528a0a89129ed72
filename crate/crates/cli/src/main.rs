fn main() {
    std::process::exit(ssvep_adapt_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(advise_cli::run(std::env::args_os()));
}

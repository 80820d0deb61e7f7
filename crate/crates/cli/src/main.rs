fn main() {
    std::process::exit(segnbdt_cli::main_with_args(std::env::args().collect()));
}

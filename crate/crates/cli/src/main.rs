fn main() {
    std::process::exit(ouro_cli::run(std::env::args_os()));
}

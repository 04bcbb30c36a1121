fn main() {
    std::process::exit(arrayhd_cli::run(std::env::args_os()));
}

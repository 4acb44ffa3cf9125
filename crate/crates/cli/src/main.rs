fn main() {
    std::process::exit(pgformer_cli::run(std::env::args_os()));
}

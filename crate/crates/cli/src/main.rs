fn main() {
    std::process::exit(ddln_cli::run(std::env::args().collect()));
}

fn main() {
    std::process::exit(caphdr2ir_cli::run(std::env::args_os()));
}

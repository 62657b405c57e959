fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(scho_core::cli_io::run_cli(&args));
}

fn main() {
    std::process::exit(phsic::cli::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(ddr_cli::cli_main(std::env::args_os()));
}

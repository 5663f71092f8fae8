fn main() {
    std::process::exit(rcmcal_cli::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(lanedrop::cli::cli_main(std::env::args_os()));
}

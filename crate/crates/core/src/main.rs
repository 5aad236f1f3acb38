fn main() {
    std::process::exit(fedpheno::cli::cli_main(std::env::args_os()));
}

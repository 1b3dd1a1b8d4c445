fn main() {
    std::process::exit(vedit::pipeline::cli::cli_main(std::env::args_os()));
}

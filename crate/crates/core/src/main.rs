fn main() {
    std::process::exit(moecg::cli::cli(std::env::args_os()));
}

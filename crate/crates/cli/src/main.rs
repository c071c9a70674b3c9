fn main() {
    std::process::exit(neurofind_cli::run_from(std::env::args_os()));
}

fn main() {
    std::process::exit(hyperfd::cli::dispatch(std::env::args_os()));
}

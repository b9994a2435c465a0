fn main() {
    std::process::exit(advscore::cli::dispatch(std::env::args_os()));
}

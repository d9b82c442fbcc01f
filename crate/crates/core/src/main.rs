fn main() {
    std::process::exit(sentorder::cli::dispatch(std::env::args_os()));
}

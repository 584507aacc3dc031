fn main() {
    std::process::exit(sketchssl::cli::dispatch(std::env::args_os()));
}

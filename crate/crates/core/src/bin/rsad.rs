fn main() {
    std::process::exit(rsad::cli::dispatch(std::env::args_os()));
}

fn main() {
    std::process::exit(longvid::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(mmp::cli::run(std::env::args_os()));
}

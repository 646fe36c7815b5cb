fn main() {
    std::process::exit(mtlsar::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(semseg::cli::run(std::env::args_os()));
}

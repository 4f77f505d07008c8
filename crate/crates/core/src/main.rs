fn main() {
    std::process::exit(sfslots::cli::run(std::env::args_os()));
}

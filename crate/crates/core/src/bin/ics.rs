fn main() {
    std::process::exit(ics::cli::run(std::env::args_os()));
}

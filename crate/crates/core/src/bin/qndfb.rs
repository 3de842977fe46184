fn main() {
    std::process::exit(qnd_feedback::harness::cli::run(std::env::args_os()));
}

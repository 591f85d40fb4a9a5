fn main() {
    std::process::exit(ctperf::cli::run(std::env::args_os()));
}

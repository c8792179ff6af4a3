fn main() {
    std::process::exit(oslo_lab::harness::cli::run(std::env::args_os()));
}

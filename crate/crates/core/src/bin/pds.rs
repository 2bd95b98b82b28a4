fn main() {
    std::process::exit(pds::harness::cli::run(std::env::args_os()));
}

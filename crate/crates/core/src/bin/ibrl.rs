fn main() {
    std::process::exit(ibrl::harness::cli_run(std::env::args_os()));
}

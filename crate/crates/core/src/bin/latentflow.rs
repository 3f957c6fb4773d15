fn main() {
    std::process::exit(latentflow::harness::cli_run(std::env::args_os()));
}

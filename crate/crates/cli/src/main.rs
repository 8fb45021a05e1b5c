fn main() {
    std::process::exit(flowgen_cli::run(std::env::args_os()));
}

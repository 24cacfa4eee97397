fn main() {
    std::process::exit(tfsepnet::cli::run(std::env::args_os()));
}

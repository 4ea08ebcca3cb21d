fn main() {
    std::process::exit(interface_core::cli::run(std::env::args_os()));
}

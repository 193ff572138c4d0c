fn main() {
    std::process::exit(fedmtl::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(gid_core::cli::main_with(std::env::args_os()));
}

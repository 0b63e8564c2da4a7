fn main() {
    std::process::exit(crpn::cli::main_with_args(std::env::args_os()));
}

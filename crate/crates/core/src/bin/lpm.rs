fn main() {
    std::process::exit(lpm_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(fixup_core::cli::run(std::env::args_os()));
}

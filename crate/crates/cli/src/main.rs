fn main() {
    std::process::exit(densecxr_cli::run(std::env::args_os()));
}

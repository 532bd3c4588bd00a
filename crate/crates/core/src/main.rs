fn main() {
    std::process::exit(zscrgan::cli::run(std::env::args_os()));
}

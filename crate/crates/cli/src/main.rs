fn main() {
    std::process::exit(vad_cli::run(std::env::args_os()));
}

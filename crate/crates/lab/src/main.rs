fn main() {
    std::process::exit(seqens::cli::run(std::env::args_os()));
}

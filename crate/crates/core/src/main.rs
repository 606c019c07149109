fn main() {
    std::process::exit(swa::cli::run());
}

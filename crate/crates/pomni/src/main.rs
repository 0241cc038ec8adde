fn main() {
    std::process::exit(pomni::cli::run());
}

fn main() {
    std::process::exit(karsein::cli::run());
}

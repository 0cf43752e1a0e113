fn main() {
    std::process::exit(scda::cli::main());
}

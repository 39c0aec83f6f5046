fn main() {
    std::process::exit(vrm::cli::main());
}

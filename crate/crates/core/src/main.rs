fn main() {
    std::process::exit(octnet::cli::main());
}

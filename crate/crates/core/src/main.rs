fn main() {
    std::process::exit(herdid::cli::main());
}

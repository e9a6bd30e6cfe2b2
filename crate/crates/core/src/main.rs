fn main() {
    std::process::exit(ntsimpute::cli::main());
}

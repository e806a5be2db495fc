fn main() {
    std::process::exit(lotn::cli::main().into());
}

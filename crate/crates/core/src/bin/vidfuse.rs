fn main() {
    std::process::exit(vidfuse::cli::main());
}

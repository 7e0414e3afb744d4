fn main() {
    std::process::exit(bem::cli::main_entry());
}

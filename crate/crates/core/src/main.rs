fn main() {
    std::process::exit(vll::cli::main_entry());
}

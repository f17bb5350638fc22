fn main() {
    std::process::exit(crackseg::cli::main_from_env());
}

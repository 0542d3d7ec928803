fn main() {
    std::process::exit(occworld::cli::main_with_args(std::env::args_os()));
}

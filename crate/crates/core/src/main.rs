fn main() {
    std::process::exit(attncnn::cli::main());
}

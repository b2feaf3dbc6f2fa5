fn main() {
    std::process::exit(xview_core::cli::main());
}

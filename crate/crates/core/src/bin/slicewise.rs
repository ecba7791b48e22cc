fn main() {
    std::process::exit(slicewise_core::cli::run());
}

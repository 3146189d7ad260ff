fn main() {
    std::process::exit(bidsbatch_core::cli::run());
}

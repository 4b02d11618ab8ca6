fn main() {
    std::process::exit(targetpre::harness::cli::run());
}

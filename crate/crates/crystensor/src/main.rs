fn main() {
    std::process::exit(crystensor::cli::run());
}

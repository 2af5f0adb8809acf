fn main() {
    std::process::exit(spikeformer::cli::run());
}

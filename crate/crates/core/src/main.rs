fn main() {
    std::process::exit(dsp_core::cli::run());
}

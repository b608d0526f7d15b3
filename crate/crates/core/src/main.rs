fn main() {
    std::process::exit(statesynth::cli::run(std::env::args_os()));
}

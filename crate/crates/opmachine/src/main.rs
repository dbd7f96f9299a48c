fn main() {
    std::process::exit(opmachine::cli::run(std::env::args()));
}

fn main() {
    std::process::exit(arfn::harness::cli::main_with(std::env::args()));
}

fn main() {
    std::process::exit(mirror_opt::cli::main());
}

fn main() {
    std::process::exit(gti3d::cli::run());
}

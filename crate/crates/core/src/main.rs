fn main() {
    std::process::exit(ulfs_kdpe::cli::run());
}

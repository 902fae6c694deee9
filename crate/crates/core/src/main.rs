fn main() {
    std::process::exit(worldcache::cli::main_with_args(std::env::args_os()));
}

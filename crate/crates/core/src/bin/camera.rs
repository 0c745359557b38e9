fn main() {
    std::process::exit(camera_moe::cli::run(std::env::args_os()));
}

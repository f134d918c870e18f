fn main() {
    std::process::exit(gradtail_cli::run(std::env::args_os()));
}

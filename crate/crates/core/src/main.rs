fn main() {
    std::process::exit(skillgate::cli::run(std::env::args_os()));
}

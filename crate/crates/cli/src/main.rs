fn main() {
    std::process::exit(plmarl_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(kdc_mae::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(cdpmil::cli::run(std::env::args_os()));
}

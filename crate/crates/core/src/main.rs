fn main() {
    std::process::exit(ensemble_ner::cli::run(std::env::args_os()));
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIARKIT_LOG", "warn")).init();
    std::process::exit(diarkit::cli::run_from_args(std::env::args_os()));
}

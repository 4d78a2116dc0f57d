fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    cookie_kit::cli::init_threads();
    std::process::exit(cookie_kit::cli::run(std::env::args_os()));
}

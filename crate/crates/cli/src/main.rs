fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = bvar_cli::run(std::env::args_os());
    bvar_cli::flush_stdout();
    std::process::exit(code);
}

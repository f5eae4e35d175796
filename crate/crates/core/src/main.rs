fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = blockformer::cli::run(&args, &mut std::io::stdout().lock());
    std::process::exit(code);
}

use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut out = std::io::stdout().lock();
    let code = spide_cli::run_from_args(std::env::args_os(), &mut out);
    let _ = out.flush();
    std::process::exit(code);
}

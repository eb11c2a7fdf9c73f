use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "{:<5} {}", record.level(), record.args()))
        .init();
    let workers = std::env::var(tilerecon_cli::WORKERS_ENV).ok();
    std::process::exit(tilerecon_cli::main_with_args(std::env::args_os(), workers.as_deref()));
}

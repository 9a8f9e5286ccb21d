use mist_cli::config::SEED_ENV;

fn main() {
    let seed = std::env::var(SEED_ENV).ok();
    std::process::exit(mist_cli::main_entry(std::env::args_os(), seed.as_deref()));
}

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = pdd_cli::Cli::parse();
    match pdd_cli::run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

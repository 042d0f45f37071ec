use clap::Parser;
use fusionfield::cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version with exit 0 and usage errors with exit 2.
            e.exit();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = run(&cli);
    if result.exit_code == 0 {
        println!("{}", result.summary);
        for p in &result.artifacts {
            println!("  wrote {}", p.display());
        }
    } else {
        eprintln!("{}", result.summary);
    }
    std::process::exit(result.exit_code);
}

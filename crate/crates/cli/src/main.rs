use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use lie_vio_cli::{execute, resolve, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprint!("{}", e.render());
            eprintln!("\n{}", Cli::command().render_usage());
            std::process::exit(2);
        }
    };
    match resolve(&cli).and_then(|cfg| execute(&cfg)) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}

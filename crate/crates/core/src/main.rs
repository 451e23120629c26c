use clap::Parser;

fn main() -> std::process::ExitCode {
    fairfpr::cli::run(fairfpr::cli::Cli::parse())
}

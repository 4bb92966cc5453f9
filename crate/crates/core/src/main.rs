use clap::Parser;

fn main() {
    let cli = focuslab::cli::Cli::parse();
    let result = focuslab::cli::run(cli);
    std::process::exit(focuslab::cli::exit_code(&result));
}

use clap::Parser;
use vistrace::cli::{dispatch, exit_code, install_interrupt_handler, Cli};

fn main() {
    install_interrupt_handler();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(i32::from(exit_code(&err)));
        }
    }
}

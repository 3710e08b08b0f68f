use std::process::exit;

fn main() {
    exit(tstal::cli::run(std::env::args_os()));
}

use clap::Parser;

fn main() {
    // Die quietly on a closed pipe (`fcpbc equilibrium | head`) instead of panicking in println!.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = fcpbc_cli::Cli::parse();
    let code = match fcpbc_cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    };
    std::process::exit(code);
}

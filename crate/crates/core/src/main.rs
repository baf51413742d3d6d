fn main() {
    if let Err(e) = cln_posture::cli::run(std::env::args_os()) {
        if let Some(c) = e.downcast_ref::<clap::Error>() {
            c.exit();
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

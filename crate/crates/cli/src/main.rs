fn main() {
    if let Err(e) = clipvid_cli::run(std::env::args_os()) {
        let msg = e.to_string();
        if msg != "usage: " {
            eprintln!("error: {msg}");
        }
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;

use cascade_rec_cli::{run, Cli, ErrorRecord};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = ErrorRecord::from_error(&e);
        let code = if record.error == "config" { 2 } else { 1 };
        eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"error\":\"runtime\",\"message\":{:?}}}", e.to_string())));
        std::process::exit(code);
    }
}

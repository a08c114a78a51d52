use clap::Parser;
use growthopt_cli::{Cli, run};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            std::process::exit(2);
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
            std::process::exit(if out.ok { 0 } else { 1 });
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}

//! Reference endpoint for the external generator protocol.
//!
//! Answers each request with two variants whose text echoes the prompt and
//! whose features are the trailing prompt features. Serves stdin/stdout by
//! default, or TCP connections with `--listen`.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use clap::Parser;
use rlab_core::variants::{GenerationRequest, GenerationResponse, ResponseVariant, PROTOCOL_VERSION};

#[derive(Parser, Debug, Clone)]
#[command(about = "Echo endpoint for the variant generation protocol")]
struct Args {
    /// Number of trailing prompt features copied into each variant.
    #[arg(long, default_value_t = 11)]
    features: usize,
    /// Serve TCP on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
    /// Sleep before every reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Reply with a record that lacks the version key.
    #[arg(long)]
    malformed: bool,
}

fn reply(args: &Args, line: &str) -> String {
    if args.delay_ms > 0 {
        thread::sleep(Duration::from_millis(args.delay_ms));
    }
    let request = match GenerationRequest::parse_line(line) {
        Ok(r) => r,
        Err(e) => return serde_json::json!({ "version": PROTOCOL_VERSION, "error": e.to_string() }).to_string(),
    };
    if args.malformed {
        return serde_json::json!({ "variants": [] }).to_string();
    }
    let tail = request.prompt_features.len().saturating_sub(args.features);
    let variants = (0..request.n_variants as usize)
        .map(|k| ResponseVariant {
            text: format!("{} :: variant {}", request.prompt_text, k + 1),
            features: request.prompt_features[tail..]
                .iter()
                .map(|f| f + 0.01 * k as f64)
                .collect(),
        })
        .collect();
    GenerationResponse {
        version: PROTOCOL_VERSION,
        variants,
    }
    .to_line()
}

fn serve(args: &Args, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", reply(args, &line))?;
        output.flush()?;
    }
    Ok(())
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    match args.listen.clone() {
        None => serve(&args, io::stdin().lock(), io::stdout().lock()),
        Some(addr) => {
            let listener = TcpListener::bind(&addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let args = args.clone();
                thread::spawn(move || {
                    let reader = BufReader::new(stream.try_clone()?);
                    serve(&args, reader, stream)
                });
            }
            Ok(())
        }
    }
}

//! Test adapter that answers every probe with fixed probabilities.
//!
//! `codebias-echo-adapter [--he P] [--she P] [--mode MODE] [--http ADDR]`
//!
//! Modes other than `ok` misbehave on purpose: `missing` drops "she",
//! `range` reports he = 1.5, `garbage` prints non-JSON, `wrong-id` answers
//! under another id, `error` returns an error response, `stall-first`
//! ignores the first request, `exit` quits on the first request.

use std::io::{BufRead, Write};

use serde_json::{json, Value};

struct Opts {
    he: f64,
    she: f64,
    mode: String,
    http: Option<String>,
}

fn parse_args() -> Opts {
    let mut o = Opts {
        he: 0.5,
        she: 0.5,
        mode: "ok".into(),
        http: None,
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut i = 0;
    while i < args.len() {
        let val = args.get(i + 1).cloned().unwrap_or_default();
        match args[i].as_str() {
            "--he" => o.he = val.parse().expect("--he takes a number"),
            "--she" => o.she = val.parse().expect("--she takes a number"),
            "--mode" => o.mode = val,
            "--http" => o.http = Some(val),
            other => panic!("unknown argument {other}"),
        }
        i += 2;
    }
    o
}

/// `None` means stay silent for this request.
fn answer(o: &Opts, seen: usize, line: &str) -> Option<String> {
    let req: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return Some(json!({"v": 1, "id": "", "error": format!("bad request: {e}")}).to_string()),
    };
    let id = req["id"].clone();
    let body = match o.mode.as_str() {
        "missing" => json!({"v": 1, "id": id, "probs": {"he": o.he}}),
        "range" => json!({"v": 1, "id": id, "probs": {"he": 1.5, "she": 0.0}}),
        "garbage" => return Some("this is not json".into()),
        "wrong-id" => json!({"v": 1, "id": "nope", "probs": {"he": o.he, "she": o.she}}),
        "error" => json!({"v": 1, "id": id, "error": "word is not a single token"}),
        "stall-first" if seen == 0 => return None,
        "exit" => std::process::exit(0),
        _ => json!({"v": 1, "id": id, "probs": {"he": o.he, "she": o.she}}),
    };
    Some(body.to_string())
}

fn main() {
    let o = parse_args();
    let mut seen = 0;
    if let Some(addr) = &o.http {
        let server = tiny_http::Server::http(addr.as_str()).expect("bind http address");
        // the bound address, for callers that asked for port 0
        println!("{}", server.server_addr());
        std::io::stdout().flush().ok();
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            if req.url() != "/probe" {
                let _ = req.respond(tiny_http::Response::from_string("not found").with_status_code(404));
                continue;
            }
            match answer(&o, seen, &body) {
                Some(a) => {
                    let _ = req.respond(tiny_http::Response::from_string(a));
                }
                None => {
                    std::thread::sleep(std::time::Duration::from_secs(5));
                    let _ = req.respond(tiny_http::Response::from_string("late"));
                }
            }
            seen += 1;
        }
        return;
    }
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if let Some(a) = answer(&o, seen, &line) {
            writeln!(out, "{a}").ok();
            out.flush().ok();
        }
        seen += 1;
    }
}

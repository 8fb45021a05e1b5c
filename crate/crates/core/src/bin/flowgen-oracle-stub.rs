//! Scripted scoring process for exercising the oracle protocol.
//!
//! Usage: flowgen-oracle-stub MODE [ARGS]
//!   fixed DS QED SA        answer every request with the same triple
//!   reverse N              answer in reverse order, N requests at a time; ds = -seq
//!   die-after N            answer N requests, then exit
//!   hang-after N           answer N requests, then stop answering
//!   garbage                answer with a non-JSON line
//!   no-pong                never complete the handshake
//!   synthetic VOCAB DIR    synthetic scores against pockets in DIR (by id)

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use flowgen_core::fraggraph::{FragmentVocabulary, MolGraphState, MoleculeJson};
use flowgen_core::pocket::{load_pockets, PocketStructure};
use flowgen_core::reward::synthetic_scores;
use serde_json::{json, Value};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("fixed");
    let num = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();

    let synthetic: Option<(FragmentVocabulary, HashMap<String, PocketStructure>)> = (mode == "synthetic").then(|| {
        let vocab = FragmentVocabulary::load(Path::new(&args[1])).expect("vocabulary");
        let pockets = load_pockets(Path::new(&args[2])).expect("pockets");
        (vocab, pockets.into_iter().map(|p| (p.id.clone(), p)).collect())
    });

    let mut answered = 0usize;
    let mut held: Vec<Value> = Vec::new();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if req.get("op").and_then(Value::as_str) == Some("ping") {
            if mode != "no-pong" {
                writeln!(out, "{}", json!({"op": "pong"})).unwrap();
                out.flush().unwrap();
            }
            continue;
        }
        let seq = req["seq"].as_u64().unwrap_or(0);
        let reply = match mode {
            "fixed" => json!({"seq": seq, "ds": num(1, -9.0), "qed": num(2, 0.5), "sa": num(3, 3.0)}),
            "garbage" => {
                writeln!(out, "not json at all").unwrap();
                out.flush().unwrap();
                continue;
            }
            "synthetic" => {
                let (vocab, pockets) = synthetic.as_ref().expect("loaded");
                let rec: MoleculeJson = serde_json::from_value(req["molecule"].clone()).expect("molecule");
                let mut rec = rec;
                rec.terminal = true;
                let state = MolGraphState::from_record(&rec, vocab).expect("valid molecule");
                let pocket = &pockets[req["pocket_id"].as_str().expect("pocket id")];
                let t = synthetic_scores(&state, vocab, pocket).expect("scores");
                json!({"seq": seq, "ds": t.ds, "qed": t.qed, "sa": t.sa_raw})
            }
            _ => json!({"seq": seq, "ds": -(seq as f64), "qed": 0.5, "sa": 3.0}),
        };
        match mode {
            "reverse" => {
                held.push(reply);
                if held.len() >= num(1, 2.0) as usize {
                    for r in held.drain(..).rev() {
                        writeln!(out, "{r}").unwrap();
                    }
                }
            }
            "die-after" | "hang-after" if answered >= num(1, 0.0) as usize => {
                if mode == "die-after" {
                    std::process::exit(3);
                }
                continue;
            }
            _ => writeln!(out, "{reply}").unwrap(),
        }
        answered += 1;
        out.flush().unwrap();
    }
}

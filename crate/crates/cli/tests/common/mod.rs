#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use idaug_cli::manifest::MANIFEST_FILE;
use idaug_cli::PipelineConfig;
use idaug_core::dataset::write_tsv;
use idaug_core::synthetic::{two_community, CommunityConfig};

/// The two-community synthetic data as a TSV under `dir`.
pub fn fixture(dir: &Path, users: usize) -> PathBuf {
    let cfg = CommunityConfig {
        users,
        ..Default::default()
    };
    let data = two_community(&cfg).unwrap();
    let path = dir.join("interactions.tsv");
    write_tsv(&data.full, &path).unwrap();
    path
}

/// A fast desk pipeline over `data`; `extra` is merged over the defaults.
/// Objects carrying a `kind` replace rather than merge.
pub fn config(data: &Path, extra: serde_json::Value) -> PipelineConfig {
    let mut base = serde_json::json!({
        "dataset": {"path": data, "name": "synthetic", "k_core": 1},
        "backend": {"kind": "desk", "model": {"d_model": 16, "ffn_hidden": 16},
                    "train": {"steps": 30, "batch_size": 16}},
        "models": {"bpr": {"epochs": 5, "dim": 16}},
        "eval": {"ks": [10, 20]},
        "augment": {"ratios": [0.02, 0.05]},
        "seeds": [0]
    });
    merge_json(&mut base, extra);
    PipelineConfig::from_json(&base.to_string()).unwrap()
}

fn merge_json(base: &mut serde_json::Value, extra: serde_json::Value) {
    match (base, extra) {
        (serde_json::Value::Object(b), serde_json::Value::Object(e)) => {
            for (k, v) in e {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => {
                        merge_json(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, e) => *b = e,
    }
}

/// Every file under `dir` keyed by relative path. The manifest's wall times
/// are zeroed.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel == MANIFEST_FILE {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                for stage in v["stages"].as_object_mut().unwrap().values_mut() {
                    stage["wall_time_secs"] = serde_json::json!(0.0);
                }
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

/// Files that differ between two snapshots, or exist in only one.
pub fn diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .filter(|n| a.get(*n) != b.get(*n))
        .cloned()
        .collect()
}

/// Completion endpoint answering each prompt with `reply(prompt)`, or with
/// status 500 when that is `None`. Returns the URL and a request counter.
pub fn completion_server(reply: fn(&str) -> Option<String>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&count);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let counter = Arc::clone(&counter);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&buf).unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let (status, body) = match reply(req["prompt"].as_str().unwrap_or("")) {
                    Some(text) => (
                        200,
                        serde_json::json!({"choices": [{"text": text}]}).to_string(),
                    ),
                    None => (500, "{}".to_string()),
                };
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    (url, count)
}

/// Echoes the prompt's numbers shifted by one, so some land on valid items.
pub fn shifted_ids(prompt: &str) -> Option<String> {
    let ids = idaug_core::parsefilter::extract_item_ids(prompt)
        .iter()
        .skip(1)
        .map(|id| (id + 1).to_string())
        .collect::<Vec<_>>()
        .join(", ");
    Some(ids)
}

//! Deterministic utterance-parallel mapping and JSON-lines file helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{XmError, XmResult};

/// Map `f` over `items`, optionally across worker threads. Results come back
/// in input order no matter how work is scheduled, so any worker count
/// produces identical output. `setup` builds one thread-local context per
/// worker (e.g. a model rebuilt from a parameter snapshot — the graph engine
/// is single-threaded, so models never cross threads).
pub fn parallel_map<T, R, C>(
    items: &[T],
    workers: usize,
    setup: impl Fn() -> XmResult<C> + Sync,
    f: impl Fn(&mut C, usize, &T) -> XmResult<R> + Sync,
) -> XmResult<Vec<R>>
where
    T: Sync,
    R: Send,
{
    if workers <= 1 || items.len() <= 1 {
        let mut ctx = setup()?;
        return items
            .iter()
            .enumerate()
            .map(|(i, item)| f(&mut ctx, i, item))
            .collect();
    }
    let workers = workers.min(items.len());
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| -> XmResult<()> {
        let mut handles = Vec::new();
        for w in 0..workers {
            let results = &results;
            let setup = &setup;
            let f = &f;
            handles.push(scope.spawn(move || -> XmResult<()> {
                let mut ctx = setup()?;
                let mut local: Vec<(usize, R)> = Vec::new();
                let mut idx = w;
                while idx < items.len() {
                    local.push((idx, f(&mut ctx, idx, &items[idx])?));
                    idx += workers;
                }
                results.lock().unwrap().extend(local);
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("worker thread panicked")?;
        }
        Ok(())
    })?;
    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(i, _)| *i);
    Ok(collected.into_iter().map(|(_, r)| r).collect())
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> XmResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> XmResult<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| {
            XmError::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(items)
}

/// Write a JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> XmResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> XmResult<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_is_order_stable_across_worker_counts() {
        let items: Vec<usize> = (0..37).collect();
        let run = |workers| {
            parallel_map(&items, workers, || Ok(0usize), |state, idx, &x| {
                *state += 1;
                Ok(x * 3 + idx)
            })
            .unwrap()
        };
        let seq = run(1);
        assert_eq!(seq, run(4));
        assert_eq!(seq, run(16));
    }

    #[test]
    fn parallel_map_propagates_errors() {
        let items: Vec<usize> = (0..8).collect();
        let out: XmResult<Vec<usize>> = parallel_map(
            &items,
            3,
            || Ok(()),
            |_, _, &x| {
                if x == 5 {
                    Err(XmError::InvalidArgument("boom".into()))
                } else {
                    Ok(x)
                }
            },
        );
        assert!(out.is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join("xmodal-util-test");
        let path = dir.join("items.jsonl");
        let items: Vec<Vec<f64>> = vec![vec![1.5, -2.25], vec![0.1]];
        write_jsonl(&path, &items).unwrap();
        let back: Vec<Vec<f64>> = read_jsonl(&path).unwrap();
        assert_eq!(items, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::Endpoint;
use crate::error::{Error, Result};

/// One line of the sample cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub prompt: String,
    pub response: String,
    pub ts: String,
}

/// Wraps an endpoint and appends every response to a JSON Lines log.
pub struct Recorder<E> {
    inner: E,
    out: BufWriter<File>,
}

pub fn record<E: Endpoint>(endpoint: E, cache_path: &Path) -> Result<Recorder<E>> {
    let file = OpenOptions::new().create(true).append(true).open(cache_path)?;
    Ok(Recorder { inner: endpoint, out: BufWriter::new(file) })
}

impl<E> Recorder<E> {
    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Endpoint> Recorder<E> {
    fn log(&mut self, prompt: &str, responses: &[String]) -> Result<()> {
        let ts = Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true);
        for response in responses {
            let rec = CacheRecord { prompt: prompt.to_string(), response: response.clone(), ts: ts.clone() };
            serde_json::to_writer(&mut self.out, &rec)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        Ok(())
    }
}

impl<E: Endpoint> Endpoint for Recorder<E> {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        let r = self.inner.generate(prompt)?;
        self.log(prompt, std::slice::from_ref(&r))?;
        Ok(r)
    }

    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let rs = self.inner.generate_batch(prompt, n)?;
        self.log(prompt, &rs)?;
        Ok(rs)
    }

    fn queries(&self) -> u64 {
        self.inner.queries()
    }
}

/// Serves recorded responses per prompt in recorded order.
#[derive(Debug)]
pub struct Replayer {
    path: PathBuf,
    queues: HashMap<String, VecDeque<String>>,
    served: HashMap<String, usize>,
    queries: u64,
}

pub fn replay(cache_path: &Path) -> Result<Replayer> {
    Replayer::open(cache_path)
}

impl Replayer {
    pub fn open(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            queues.entry(rec.prompt).or_default().push_back(rec.response);
        }
        Ok(Self { path: path.to_path_buf(), queues, served: HashMap::new(), queries: 0 })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Responses still available for `prompt`.
    pub fn remaining(&self, prompt: &str) -> usize {
        self.queues.get(prompt).map_or(0, VecDeque::len)
    }
}

impl Endpoint for Replayer {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        let served = self.served.entry(prompt.to_string()).or_default();
        let next = self.queues.get_mut(prompt).and_then(VecDeque::pop_front);
        match next {
            Some(r) => {
                *served += 1;
                self.queries += 1;
                Ok(r)
            }
            None => Err(Error::ReplayExhausted { prompt: prompt.to_string(), served: *served }),
        }
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::blackbox::simulate;
    use crate::distributions::{Categorical, DecodingStrategy};

    fn sim() -> crate::blackbox::SimulatedSystem {
        let d = Categorical::uniform(["a", "b", "c", "d"]).unwrap();
        let table = HashMap::from([("m".to_string(), d.clone()), ("n".to_string(), d)]);
        simulate(table, DecodingStrategy::top_k(3).unwrap(), 11).unwrap()
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut rec = record(sim(), &path).unwrap();
        let mut live = rec.generate_batch("m", 30).unwrap();
        live.extend((0..20).map(|_| rec.generate("m").unwrap()));
        let other = rec.generate_batch("n", 5).unwrap();
        assert_eq!(rec.queries(), 55);
        drop(rec);

        let mut rep = replay(&path).unwrap();
        assert_eq!(rep.generate_batch("n", 5).unwrap(), other);
        let replayed = rep.generate_batch("m", 50).unwrap();
        assert_eq!(replayed, live);
        match rep.generate("m") {
            Err(Error::ReplayExhausted { served, .. }) => assert_eq!(served, 50),
            other => panic!("expected exhaustion, got {other:?}"),
        }
        assert!(rep.generate("unseen").is_err());
    }

    #[test]
    fn records_are_timestamped_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        record(sim(), &path).unwrap().generate_batch("m", 2).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: CacheRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.prompt, "m");
        assert!(chrono::DateTime::parse_from_rfc3339(&rec.ts).is_ok());
    }

    #[test]
    fn corrupt_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{\"prompt\":\"m\",\"response\":\"a\",\"ts\":\"2024-01-01T00:00:00Z\"}\n{not json\n")
            .unwrap();
        match replay(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

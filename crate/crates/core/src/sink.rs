//! Destinations for per-pair match output. Matching hands results to a
//! sink and moves on; the file sink persists on its own writer thread.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;

use crate::feature_io::{save_matches, FeatureIoError, MatchRecord};

/// Matches of one image pair, `a < b` in global image order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub pair: (u32, u32),
    pub image_ids: (String, String),
    pub matches: Vec<MatchRecord>,
}

pub trait MatchSink: Sync {
    fn submit(&self, output: PairMatches);
}

/// Match file name for a pair; depends only on the global indices.
pub fn match_file_name(pair: (u32, u32)) -> String {
    format!("{:06}_{:06}.matches", pair.0, pair.1)
}

/// In-memory sink, mainly for tests and the oracle.
#[derive(Debug, Default)]
pub struct CollectingSink {
    inner: Mutex<Vec<PairMatches>>,
}

impl CollectingSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Everything submitted, sorted by pair.
    pub fn into_sorted(self) -> Vec<PairMatches> {
        let mut v = self.inner.into_inner().unwrap_or_else(|e| e.into_inner());
        v.sort_by_key(|p| p.pair);
        v
    }
}

impl MatchSink for CollectingSink {
    fn submit(&self, output: PairMatches) {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).push(output);
    }
}

#[derive(Debug, Default)]
pub struct SinkReport {
    pub written: usize,
    pub failures: Vec<(PathBuf, FeatureIoError)>,
}

/// Writes one match file per pair into a directory from a background
/// thread. Call [`AsyncFileSink::finish`] to flush and collect failures.
pub struct AsyncFileSink {
    tx: Mutex<Option<mpsc::Sender<PairMatches>>>,
    writer: Option<thread::JoinHandle<SinkReport>>,
}

impl AsyncFileSink {
    pub fn new(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let (tx, rx) = mpsc::channel::<PairMatches>();
        let writer = thread::Builder::new()
            .name("match-writer".into())
            .spawn(move || {
                let mut report = SinkReport::default();
                for out in rx {
                    let path = dir.join(match_file_name(out.pair));
                    let ids = (out.image_ids.0.as_str(), out.image_ids.1.as_str());
                    match save_matches(ids, &out.matches, &path) {
                        Ok(()) => report.written += 1,
                        Err(e) => report.failures.push((path, e)),
                    }
                }
                report
            })?;
        Ok(AsyncFileSink {
            tx: Mutex::new(Some(tx)),
            writer: Some(writer),
        })
    }

    pub fn finish(mut self) -> SinkReport {
        self.close()
    }

    fn close(&mut self) -> SinkReport {
        drop(self.tx.lock().unwrap_or_else(|e| e.into_inner()).take());
        self.writer
            .take()
            .map(|h| h.join().expect("writer thread panicked"))
            .unwrap_or_default()
    }
}

impl MatchSink for AsyncFileSink {
    fn submit(&self, output: PairMatches) {
        let guard = self.tx.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(tx) = guard.as_ref() {
            // The receiver only goes away in `close`, after the sender.
            let _ = tx.send(output);
        }
    }
}

impl Drop for AsyncFileSink {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::load_matches;

    fn sample(a: u32, b: u32, n: u32) -> PairMatches {
        PairMatches {
            pair: (a, b),
            image_ids: (format!("img{a}"), format!("img{b}")),
            matches: (0..n).map(|i| MatchRecord::new(i, i + 1, i as f32 * 1.5)).collect(),
        }
    }

    #[test]
    fn collecting_sink_sorts_by_pair() {
        let sink = CollectingSink::new();
        sink.submit(sample(2, 3, 1));
        sink.submit(sample(0, 5, 2));
        sink.submit(sample(0, 1, 0));
        let pairs: Vec<_> = sink.into_sorted().iter().map(|p| p.pair).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 5), (2, 3)]);
    }

    #[test]
    fn file_sink_writes_every_pair() {
        let dir = tempfile::tempdir().unwrap();
        let sink = AsyncFileSink::new(dir.path()).unwrap();
        std::thread::scope(|s| {
            for a in 0..4u32 {
                let sink = &sink;
                s.spawn(move || sink.submit(sample(a, a + 1, a)));
            }
        });
        let report = sink.finish();
        assert_eq!(report.written, 4);
        assert!(report.failures.is_empty());
        let ((i, j), m) = load_matches(dir.path().join(match_file_name((2, 3)))).unwrap();
        assert_eq!((i.as_str(), j.as_str()), ("img2", "img3"));
        assert_eq!(m, sample(2, 3, 2).matches);
    }

    #[test]
    fn file_sink_reports_write_failures() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("gone");
        let sink = AsyncFileSink::new(&sub).unwrap();
        std::fs::remove_dir(&sub).unwrap();
        sink.submit(sample(0, 1, 1));
        let report = sink.finish();
        assert_eq!(report.written, 0);
        assert_eq!(report.failures.len(), 1);
    }
}

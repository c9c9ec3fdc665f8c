//! Content-addressed record/replay of backend calls.
//!
//! Each line of the store is one call: `{key, kind, request, response}`,
//! where `key` is the SHA-256 of the canonical `{kind, request}` JSON.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, Capabilities, ChatMessage, GenParams, Generation, ScoringContext,
};
use crate::trace::TokenScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Generate,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub kind: CallKind,
    pub request: Value,
    pub response: Value,
}

fn generate_request(messages: &[ChatMessage], params: &GenParams) -> Value {
    json!({ "messages": messages, "params": params })
}

fn score_request(context: &ScoringContext, target: &str) -> Value {
    json!({ "context": context, "target": target })
}

pub fn call_key(kind: CallKind, request: &Value) -> String {
    let canonical =
        serde_json::to_vec(&json!({ "kind": kind, "request": request })).expect("json serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Io(format!("{}: {e}", path.display()))
}

/// Answers only calls found in a previously recorded store.
pub struct ReplayBackend {
    entries: HashMap<String, ReplayEntry>,
    identity: String,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
            entries.insert(entry.key.clone(), entry);
        }
        Ok(Self::from_entries(
            entries.into_values(),
            format!("replay:{}", path.display()),
        ))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>, identity: String) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key.clone(), e)).collect(),
            identity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup<T: for<'de> Deserialize<'de>>(
        &self,
        kind: CallKind,
        request: &Value,
    ) -> Result<T, BackendError> {
        let key = call_key(kind, request);
        let entry = self
            .entries
            .get(&key)
            .ok_or(BackendError::ReplayMiss(key))?;
        serde_json::from_value(entry.response.clone())
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

impl Backend for ReplayBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            score: true,
            entropy_exact: false,
        }
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError> {
        self.lookup(CallKind::Generate, &generate_request(messages, params))
    }

    fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        self.lookup(CallKind::Score, &score_request(context, target))
    }
}

/// Forwards to an inner backend and appends every successful call to a store.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    sink: Mutex<BufWriter<File>>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn Backend>, path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            inner,
            sink: Mutex::new(BufWriter::new(file)),
        })
    }

    fn record(&self, kind: CallKind, request: Value, response: Value) -> Result<(), BackendError> {
        let entry = ReplayEntry {
            key: call_key(kind, &request),
            kind,
            request,
            response,
        };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        let mut sink = self.sink.lock().expect("replay sink poisoned");
        writeln!(sink, "{line}")
            .and_then(|_| sink.flush())
            .map_err(|e| BackendError::Io(e.to_string()))
    }
}

impl Backend for RecordingBackend {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError> {
        let out = self.inner.generate(messages, params)?;
        self.record(
            CallKind::Generate,
            generate_request(messages, params),
            serde_json::to_value(&out).expect("generation serializes"),
        )?;
        Ok(out)
    }

    fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        let out = self.inner.score_tokens(context, target)?;
        self.record(
            CallKind::Score,
            score_request(context, target),
            serde_json::to_value(&out).expect("scores serialize"),
        )?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;
    use crate::backend::ContextKind;
    use crate::oracle::ToyModel;
    use std::collections::BTreeMap;

    fn toy() -> Arc<dyn Backend> {
        let model = ToyModel::new(
            vec!["x".into(), "y".into(), "z".into()],
            BTreeMap::from([("default".to_string(), vec![vec![0.2, 0.3, 0.5]])]),
        )
        .unwrap();
        Arc::new(ToyBackend::new(model, 11))
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.jsonl");
        let rec = RecordingBackend::create(toy(), &path).unwrap();
        let msgs = vec![ChatMessage::user("hello")];
        let params = GenParams {
            seed: Some(4),
            ..GenParams::default()
        };
        let ctx = ScoringContext {
            kind: ContextKind::WithTrace,
            messages: msgs.clone(),
        };
        let g = rec.generate(&msgs, &params).unwrap();
        let s = rec.score_tokens(&ctx, "x z").unwrap();
        drop(rec);

        let replay = ReplayBackend::load(&path).unwrap();
        assert_eq!(replay.len(), 2);
        assert_eq!(replay.generate(&msgs, &params).unwrap(), g);
        assert_eq!(replay.score_tokens(&ctx, "x z").unwrap(), s);
        // Any change to the request is a miss.
        let other = GenParams {
            seed: Some(5),
            ..params
        };
        assert!(matches!(
            replay.generate(&msgs, &other),
            Err(BackendError::ReplayMiss(_))
        ));
        assert!(matches!(
            replay.score_tokens(&ctx, "x"),
            Err(BackendError::ReplayMiss(_))
        ));
    }
}

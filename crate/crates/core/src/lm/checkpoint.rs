use std::fmt::Write as _;
use std::path::Path;

use super::LogLinearModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "bow-checkpoint v1";

/// Serializes weights in row-major `(feature, token)` order, one per line.
pub fn checkpoint_string(model: &LogLinearModel) -> String {
    let mut out = String::with_capacity(model.weights().len() * 12 + 32);
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    let _ = writeln!(out, "{} {}", model.feature_count(), model.weights().len() / model.feature_count());
    for w in model.weights() {
        let _ = writeln!(out, "{w}");
    }
    out
}

pub fn save_checkpoint(model: &LogLinearModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_string(model)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str, pad: usize) -> Result<LogLinearModel> {
    let mut lines = crate::data::strip_text_stamp(text).lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(Error::MalformedCheckpoint(format!("missing `{CHECKPOINT_HEADER}` header")));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::MalformedCheckpoint("missing dimensions".into()))?;
    let parsed: Vec<usize> = dims
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::MalformedCheckpoint(format!("bad dimensions `{dims}`: {e}")))?;
    let [features, vocab] = parsed[..] else {
        return Err(Error::MalformedCheckpoint(format!("bad dimensions `{dims}`")));
    };
    let weights = lines
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::MalformedCheckpoint(format!("weight {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LogLinearModel::from_weights(vocab, features, pad, weights)
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>, pad: usize) -> Result<LogLinearModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::UnreadablePath {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&text, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn weights_round_trip_exactly(ws in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let m = LogLinearModel::from_weights(4, 3, 0, ws).unwrap();
            let back = parse_checkpoint(&checkpoint_string(&m), 0).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn layout_and_errors() {
        let m = LogLinearModel::from_weights(4, 2, 0, (0..8).map(f64::from).collect()).unwrap();
        let s = checkpoint_string(&m);
        assert!(s.starts_with("bow-checkpoint v1\n2 4\n0\n1\n"));
        assert!(parse_checkpoint("nope\n", 0).is_err());
        assert!(parse_checkpoint("bow-checkpoint v1\n2 4\n1\n", 0).is_err());
        assert!(parse_checkpoint("bow-checkpoint v1\n2\n", 0).is_err());
    }
}

//! Line-delimited corpus files: a header record, then one scene per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::world::{Corpus, Scene};

pub const FORMAT: &str = "uni-eden-corpus";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Serialized corpus text. Floats are written in shortest round-trip form.
pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format: FORMAT.into(),
        version: VERSION,
    })?;
    out.push('\n');
    for s in &corpus.scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(corpus_to_string(corpus)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(parse(1, "missing header record".into())),
    };
    let h: Header = serde_json::from_str(&header).map_err(|e| parse(1, format!("bad header: {e}")))?;
    if h.format != FORMAT || h.version != VERSION {
        return Err(Error::Version {
            found: format!("{} v{}", h.format, h.version),
            expected: format!("{FORMAT} v{VERSION}"),
        });
    }
    let mut scenes = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            return Err(parse(n, "empty record".into()));
        }
        let s: Scene = serde_json::from_str(&line).map_err(|e| parse(n, e.to_string()))?;
        s.validate().map_err(|m| parse(n, m))?;
        scenes.push(s);
    }
    Ok(Corpus { scenes })
}

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "blockformer-checkpoint 1";

/// Writes a text header (one `name shape offset` line per tensor, shape as
/// comma-separated dims, offset in bytes into the payload) terminated by
/// `end`, followed by the concatenated little-endian `f64` payloads.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut header = format!("{MAGIC}\n");
    let mut payload = Vec::new();
    for (name, t) in params {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("unstorable parameter name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join(",") };
        header.push_str(&format!("{name} {dims} {}\n", payload.len()));
        payload.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.extend(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(lines.len() + 1, "unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| bad(lines.len() + 1, "header is not UTF-8".into()))?
            .to_string();
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad(1, format!("missing {MAGIC:?} header")));
    }
    let payload = &bytes[pos..];
    let mut out = Vec::with_capacity(lines.len() - 1);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, dims, offset] = fields[..] else {
            return Err(bad(i + 1, format!("expected `name shape offset`, got {line:?}")));
        };
        let shape = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|e| bad(i + 1, format!("bad shape {dims:?}: {e}")))?
        };
        let offset: usize = offset.parse().map_err(|e| bad(i + 1, format!("bad offset: {e}")))?;
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > payload.len() {
            return Err(Error::ShortRead {
                path: path.to_path_buf(),
                expected: (pos + end) as u64,
                actual: bytes.len() as u64,
            });
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(out)
}

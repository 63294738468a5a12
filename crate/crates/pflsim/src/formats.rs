//! On-disk formats: JSONL datasets and raw tensors behind a JSON header line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use pflsim_core::data::{ClientDataset, Sample};
use pflsim_core::model::{AnswerHead, Modality, PromptKind, PromptSet};
use pflsim_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

/// Reads one sample per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_jsonl(path: &Path) -> Result<ClientDataset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Line { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        samples.push(s);
    }
    ClientDataset::from_samples(samples).map_err(|reason| Error::Data { path: path.to_path_buf(), reason })
}

pub fn write_jsonl(path: &Path, dataset: &ClientDataset) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        serde_json::to_writer(&mut w, s).map_err(|e| format_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// First line of a tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub client: usize,
    /// `image` or `text` for prompts, absent for head weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    /// `local`, `shared`, or a head tensor name (`w1`, `b1`, `w2`, `b2`).
    pub kind: String,
    pub shape: Vec<usize>,
}

pub fn write_tensor(path: &Path, header: &TensorHeader, tensor: &Tensor) -> Result<()> {
    if header.shape != tensor.shape() {
        return Err(format_err(path, format!("header shape {:?} != tensor shape {:?}", header.shape, tensor.shape())));
    }
    let mut buf = serde_json::to_vec(header).map_err(|e| format_err(path, e))?;
    buf.push(b'\n');
    buf.reserve(tensor.len() * 8);
    for x in tensor.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<(TensorHeader, Tensor)> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| format_err(path, "missing header line"))?;
    let header: TensorHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let payload = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if payload.len() != n * 8 {
        return Err(format_err(path, format!("payload has {} bytes, shape {:?} needs {}", payload.len(), header.shape, n * 8)));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let tensor = Tensor::new(header.shape.clone(), data).map_err(|e| format_err(path, e))?;
    Ok((header, tensor))
}

pub fn prompt_file_name(client: usize, modality: Modality, kind: PromptKind) -> String {
    format!("client{client}_{}_{}.bin", modality.as_str(), kind.as_str())
}

pub fn head_file_name(client: usize, part: &str) -> String {
    format!("client{client}_head_{part}.bin")
}

pub const HEAD_PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

pub fn write_prompt(dir: &Path, client: usize, p: &PromptSet) -> Result<()> {
    let header = TensorHeader {
        client,
        modality: Some(p.modality()),
        kind: p.kind().as_str().to_string(),
        shape: p.shape().to_vec(),
    };
    write_tensor(&dir.join(prompt_file_name(client, p.modality(), p.kind())), &header, p.values())
}

pub fn read_prompt(dir: &Path, client: usize, modality: Modality, kind: PromptKind) -> Result<PromptSet> {
    let path = dir.join(prompt_file_name(client, modality, kind));
    if !path.exists() {
        return Err(format_err(&path, format!("missing {} {} prompt checkpoint of client {client}", modality.as_str(), kind.as_str())));
    }
    let (h, t) = read_tensor(&path)?;
    if h.client != client || h.modality != Some(modality) || h.kind != kind.as_str() {
        return Err(format_err(&path, format!("header {h:?} does not describe client {client}")));
    }
    PromptSet::new(t, modality, kind).map_err(|e| format_err(&path, e))
}

pub fn write_head(dir: &Path, client: usize, head: &AnswerHead) -> Result<()> {
    for (part, t) in HEAD_PARTS.iter().zip(head.tensors()) {
        let header = TensorHeader { client, modality: None, kind: (*part).to_string(), shape: t.shape().to_vec() };
        write_tensor(&dir.join(head_file_name(client, part)), &header, t)?;
    }
    Ok(())
}

pub fn read_head(dir: &Path, client: usize, dropout: f64) -> Result<AnswerHead> {
    let mut parts = Vec::with_capacity(4);
    for part in HEAD_PARTS {
        let path = dir.join(head_file_name(client, part));
        if !path.exists() {
            return Err(format_err(&path, format!("missing head checkpoint of client {client}")));
        }
        let (h, t) = read_tensor(&path)?;
        if h.client != client || h.kind != part {
            return Err(format_err(&path, format!("header {h:?} does not describe client {client}")));
        }
        parts.push(t);
    }
    let [w1, b1, w2, b2]: [Tensor; 4] = parts.try_into().unwrap();
    let ok = w1.rank() == 2
        && w2.rank() == 2
        && b1.shape() == [w1.shape()[1]]
        && w2.shape()[0] == w1.shape()[1]
        && b2.shape() == [w2.shape()[1]];
    if !ok {
        return Err(format_err(&dir.join(head_file_name(client, "w1")), "inconsistent head shapes"));
    }
    Ok(AnswerHead { w1, b1, w2, b2, dropout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pflsim_core::data::DataError;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap();
        let h = TensorHeader { client: 3, modality: Some(Modality::Text), kind: "local".into(), shape: vec![2, 3] };
        write_tensor(&path, &h, &t).unwrap();
        let (h2, t2) = read_tensor(&path).unwrap();
        assert_eq!(h, h2);
        assert!(t.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let raw = fs::read(&path).unwrap();
        let first = std::str::from_utf8(&raw[..raw.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert_eq!(first, r#"{"client":3,"modality":"text","kind":"local","shape":[2,3]}"#);
        assert_eq!(&raw[raw.len() - 8..], &3.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        fs::write(&path, b"{\"client\":0,\"kind\":\"w1\",\"shape\":[2]}\n12345678").unwrap();
        let err = read_tensor(&path).unwrap_err().to_string();
        assert!(err.contains("needs 16"), "{err}");
    }

    #[test]
    fn jsonl_errors_cite_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = r#"{"image_tokens":[1,2],"question_tokens":[1,3],"answer":0}"#;
        let mut text = String::new();
        for _ in 0..6 {
            text.push_str(good);
            text.push('\n');
        }
        text.push_str("{\"image_tokens\":[1,2],\n");
        fs::write(&path, &text).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::Line { line: 7, .. }), "{err}");

        fs::write(&path, "").unwrap();
        assert!(matches!(load_jsonl(&path).unwrap_err(), Error::Data { reason: DataError::Empty, .. }));
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = pflsim_core::rng::stream(1, 2);
        let head = AnswerHead::init(4, 6, 3, 0.2, &mut rng);
        write_head(dir.path(), 5, &head).unwrap();
        assert_eq!(read_head(dir.path(), 5, 0.2).unwrap(), head);
        let err = read_head(dir.path(), 4, 0.2).unwrap_err().to_string();
        assert!(err.contains("client 4"), "{err}");
    }
}

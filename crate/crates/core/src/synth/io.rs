//! Line-delimited JSON corpus files. Frame matrices are stored as base64 of
//! little-endian `f32` values with explicit `rows`/`cols`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Document, SpeechUtterance};
use crate::error::{Error, Result};

pub mod frames_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor2D;

    #[derive(Serialize, Deserialize)]
    struct Blob {
        rows: usize,
        cols: usize,
        data: String,
    }

    pub fn encode(t: &Tensor2D<f32>) -> String {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(rows: usize, cols: usize, data: &str) -> Result<Tensor2D<f32>, String> {
        let bytes = STANDARD.decode(data).map_err(|e| e.to_string())?;
        if bytes.len() != rows * cols * 4 {
            return Err(format!(
                "frame blob has {} bytes, expected {rows}x{cols}x4",
                bytes.len()
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor2D::new(rows, cols, values).map_err(|e| e.to_string())
    }

    pub fn serialize<S: Serializer>(t: &Tensor2D<f32>, s: S) -> Result<S::Ok, S::Error> {
        Blob {
            rows: t.rows(),
            cols: t.cols(),
            data: encode(t),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor2D<f32>, D::Error> {
        let blob = Blob::deserialize(d)?;
        decode(blob.rows, blob.cols, &blob.data).map_err(D::Error::custom)
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header { vocab: usize },
    Document(Document),
    Topic(Document),
    Utterance(SpeechUtterance),
}

pub fn write_records(path: &Path, records: impl IntoIterator<Item = Record>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn dataset_records(ds: &Dataset) -> Vec<Record> {
    std::iter::once(Record::Header { vocab: ds.vocab })
        .chain(ds.documents.iter().cloned().map(Record::Document))
        .chain(ds.topics.iter().cloned().map(Record::Topic))
        .chain(ds.utterances.iter().cloned().map(Record::Utterance))
        .collect()
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_records(path, dataset_records(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = Dataset {
        vocab: 0,
        documents: Vec::new(),
        topics: Vec::new(),
        utterances: Vec::new(),
    };
    for rec in read_records(path)? {
        match rec {
            Record::Header { vocab } => ds.vocab = vocab,
            Record::Document(d) => ds.documents.push(d),
            Record::Topic(t) => ds.topics.push(t),
            Record::Utterance(u) => ds.utterances.push(u),
        }
    }
    if ds.vocab == 0 {
        return Err(Error::Dataset(format!("{}: missing header record", path.display())));
    }
    Ok(ds)
}

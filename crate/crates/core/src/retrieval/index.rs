//! Exact cosine search over unit-normalized document embeddings.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::ops;
use crate::synth::Document;
use crate::tensor::Tensor2D;
use crate::train::checkpoint::sha256_hex;

pub const INDEX_FORMAT: &str = "speechemb-index/1";
pub const INDEX_MANIFEST: &str = "manifest.json";
pub const INDEX_BLOB: &str = "embeddings.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    doc_ids: Vec<u32>,
    matrix: Tensor2D<f32>,
    model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexManifest {
    format: String,
    model_hash: String,
    rows: usize,
    dim: usize,
    embeddings_sha256: String,
    doc_ids: Vec<u32>,
}

fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let n = ops::l2_norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

impl RetrievalIndex {
    /// Builds from precomputed embeddings, normalizing every row.
    pub fn from_embeddings(entries: Vec<(u32, Vec<f32>)>, model_hash: &str) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("build_index"));
        }
        let dim = entries[0].1.len();
        let mut seen = BTreeSet::new();
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut doc_ids = Vec::with_capacity(entries.len());
        for (id, emb) in entries {
            if !seen.insert(id) {
                return Err(Error::Dataset(format!("duplicate document id {id} in index")));
            }
            if emb.len() != dim {
                return Err(Error::Dimension {
                    op: "build_index",
                    left: (1, dim),
                    right: (1, emb.len()),
                });
            }
            data.extend(normalize(&emb).ok_or(Error::DegenerateDocument(id))?);
            doc_ids.push(id);
        }
        Ok(Self {
            matrix: Tensor2D::new(doc_ids.len(), dim, data)?,
            doc_ids,
            model_hash: model_hash.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn doc_ids(&self) -> &[u32] {
        &self.doc_ids
    }

    pub fn matrix(&self) -> &Tensor2D<f32> {
        &self.matrix
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn embedding(&self, doc_id: u32) -> Option<&[f32]> {
        self.doc_ids.iter().position(|&d| d == doc_id).map(|r| self.matrix.row(r))
    }

    /// Cosine score of `q` against every row, in row order.
    pub fn scores(&self, q: &[f32]) -> Result<Vec<f32>> {
        if q.len() != self.dim() {
            return Err(Error::Dimension {
                op: "search",
                left: (1, q.len()),
                right: self.matrix.shape(),
            });
        }
        let q = normalize(q).ok_or(Error::DegenerateVector("query"))?;
        Ok(self.matrix.iter_rows().map(|row| ops::dot(row, &q)).collect())
    }

    /// Exact top-`k` by descending cosine; ties go to the lower doc id.
    pub fn search_topk(&self, q: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
        if k == 0 || k > self.len() {
            return Err(Error::range("k", k, "[1, n_docs]"));
        }
        let scores = self.scores(q)?;
        let mut ranked: Vec<(u32, f32)> = self.doc_ids.iter().copied().zip(scores).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let blob: Vec<u8> = self.matrix.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = IndexManifest {
            format: INDEX_FORMAT.to_string(),
            model_hash: self.model_hash.clone(),
            rows: self.len(),
            dim: self.dim(),
            embeddings_sha256: sha256_hex(&blob),
            doc_ids: self.doc_ids.clone(),
        };
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join(INDEX_MANIFEST), json)?;
        fs::write(dir.join(INDEX_BLOB), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: IndexManifest = serde_json::from_slice(&fs::read(dir.join(INDEX_MANIFEST))?)?;
        if manifest.format != INDEX_FORMAT {
            return Err(Error::Checkpoint(format!("unknown index format `{}`", manifest.format)));
        }
        let blob = fs::read(dir.join(INDEX_BLOB))?;
        if blob.len() != manifest.rows * manifest.dim * 4 || sha256_hex(&blob) != manifest.embeddings_sha256 {
            return Err(Error::Checkpoint("index blob does not match its manifest".into()));
        }
        if manifest.doc_ids.len() != manifest.rows {
            return Err(Error::Checkpoint("index doc_ids do not match row count".into()));
        }
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            matrix: Tensor2D::new(manifest.rows, manifest.dim, data)?,
            doc_ids: manifest.doc_ids,
            model_hash: manifest.model_hash,
        })
    }
}

/// Embeds every document with the model's document path.
pub fn build_index(docs: &[Document], model: &EmbeddingModel<f32>, model_hash: &str) -> Result<RetrievalIndex> {
    let entries = docs
        .iter()
        .map(|d| Ok((d.doc_id, model.embed_text(&d.tokens)?)))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::from_embeddings(entries, model_hash)
}

//! On-disk corpus layout.
//!
//! A corpus directory holds `manifest.toml` plus, per split, a matrix file
//! (`<split>.f32`), and for labeled splits `<split>.labels` and
//! `<split>.ids` text files with one integer per line.
//!
//! Matrix file: the bytes `XMAT`, then `u32` format version, `u32` rows,
//! `u32` cols, then `rows * cols` little-endian `f32` values, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GeneratedCorpus, LabeledData, Matrix32, PairedTIDataset, SynthSpec};
use crate::error::{Error, Result};

const MATRIX_MAGIC: &[u8; 4] = b"XMAT";
const MATRIX_VERSION: u32 = 1;
pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub tr_class_ids: Vec<usize>,
    pub ti_class_ids: Vec<usize>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_matrix(m: &Matrix32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_matrix(path: &Path, bytes: &[u8]) -> Result<Matrix32> {
    if bytes.len() < 16 || &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::format(path, "not a matrix file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != MATRIX_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MATRIX_VERSION,
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("expected {} values, found {} bytes", rows * cols, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix32 { rows, cols, data })
}

pub fn write_matrix(path: &Path, m: &Matrix32) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(path, &bytes)
}

fn encode_list<T: ToString>(values: &[T]) -> Vec<u8> {
    let mut s = String::new();
    for v in values {
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s.into_bytes()
}

fn decode_list<T: std::str::FromStr>(path: &Path, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format(path, "not utf-8"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: not an integer", i + 1)))
        })
        .collect()
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, bytes: Vec<u8>) -> Result<()> {
        let path = self.dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            name,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn labeled(&mut self, split: &str, d: &LabeledData) -> Result<()> {
        self.put(format!("{split}.f32"), encode_matrix(&d.x))?;
        self.put(format!("{split}.labels"), encode_list(&d.labels))?;
        self.put(format!("{split}.ids"), encode_list(&d.latent_ids))
    }
}

/// Writes every split and the manifest into `dir`, creating it if needed.
pub fn save_corpus(corpus: &GeneratedCorpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer {
        dir,
        files: Vec::new(),
    };
    for (d, split) in corpus.source_domains.iter().enumerate() {
        w.labeled(&format!("source_d{d}"), split)?;
    }
    w.labeled("source_eval", &corpus.source_eval)?;
    w.labeled("target", &corpus.target)?;
    w.put("ti_source.f32".into(), encode_matrix(&corpus.ti.source))?;
    w.put("ti_target.f32".into(), encode_matrix(&corpus.ti.target))?;
    w.put("ti.ids".into(), encode_list(&corpus.ti.latent_ids))?;
    w.put("ti.classes".into(), encode_list(&corpus.ti.classes))?;

    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        spec: corpus.spec.clone(),
        tr_class_ids: corpus.tr_class_ids.clone(),
        ti_class_ids: corpus.ti_class_ids.clone(),
        files: w.files,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a CorpusManifest,
}

impl Reader<'_> {
    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let entry = self
            .manifest
            .files
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::format(&path, "not listed in manifest"))?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        Ok(bytes)
    }

    fn matrix(&self, name: &str) -> Result<Matrix32> {
        decode_matrix(&self.dir.join(name), &self.bytes(name)?)
    }

    fn list<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>> {
        decode_list(&self.dir.join(name), &self.bytes(name)?)
    }

    fn labeled(&self, split: &str) -> Result<LabeledData> {
        let x = self.matrix(&format!("{split}.f32"))?;
        let labels: Vec<usize> = self.list(&format!("{split}.labels"))?;
        let latent_ids: Vec<u64> = self.list(&format!("{split}.ids"))?;
        if labels.len() != x.rows || latent_ids.len() != x.rows {
            return Err(Error::format(
                &self.dir.join(split),
                "label or id count differs from row count",
            ));
        }
        Ok(LabeledData { x, labels, latent_ids })
    }
}

/// Reads a corpus written by [`save_corpus`], verifying every file hash.
pub fn load_corpus(dir: &Path) -> Result<GeneratedCorpus> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let r = Reader {
        dir,
        manifest: &manifest,
    };
    let source_domains = (0..manifest.spec.num_domains)
        .map(|d| r.labeled(&format!("source_d{d}")))
        .collect::<Result<Vec<_>>>()?;
    let ti = PairedTIDataset {
        source: r.matrix("ti_source.f32")?,
        target: r.matrix("ti_target.f32")?,
        latent_ids: r.list("ti.ids")?,
        classes: r.list("ti.classes")?,
    };
    if ti.source.rows != ti.target.rows || ti.latent_ids.len() != ti.source.rows {
        return Err(Error::format(dir, "task-irrelevant pairs are misaligned"));
    }
    Ok(GeneratedCorpus {
        spec: manifest.spec.clone(),
        tr_class_ids: manifest.tr_class_ids.clone(),
        ti_class_ids: manifest.ti_class_ids.clone(),
        source_domains,
        source_eval: r.labeled("source_eval")?,
        target: r.labeled("target")?,
        ti,
    })
}

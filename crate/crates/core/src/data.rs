//! Dataset types and on-disk formats.
//!
//! Everything is plain text and diff-able at desk scale: feature files start
//! with an `n d` header followed by `n` rows of `d` floats, caption files
//! hold one whitespace-tokenized caption per line, the vocabulary lists one
//! token per line (reserved ids 0..=3 are implicit), and a manifest lists
//! per sample the id, per-modality feature paths, and the caption path.
//! Floats are written with Rust's shortest round-trip formatting, so every
//! save/load cycle is bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved ids preceding real tokens.
pub const RESERVED: u32 = 4;

const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved tokens, in id order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if RESERVED_TOKENS.contains(&t.as_str()) {
                return Err(Error::Data(format!("token {t} collides with a reserved token")));
            }
            if index.insert(t.clone(), RESERVED + i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including the four reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_TOKENS[id as usize])
        } else {
            self.tokens.get((id - RESERVED) as usize).map(|s| s.as_str())
        }
    }

    /// Encodes surface words, rejecting anything outside the vocabulary.
    pub fn encode_strict(&self, words: &[&str]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("unknown token `{w}`")))
            })
            .collect()
    }

    /// Surface words for a token-id sequence (reserved ids included).
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        Vocabulary::new(tokens)
    }
}

/// One named temporal feature stream, `n x d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream {
    pub name: String,
    pub features: Tensor,
}

impl ModalityStream {
    pub fn new(name: impl Into<String>, features: Tensor) -> Self {
        ModalityStream {
            name: name.into(),
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// One multimodal sample with its reference captions (token ids, each
/// terminated by EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub streams: Vec<ModalityStream>,
    pub captions: Vec<Vec<u32>>,
}

impl Sample {
    pub fn stream(&self, name: &str) -> Option<&ModalityStream> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::Data(format!("sample {}: no reference captions", self.id)));
        }
        for c in &self.captions {
            if c.last() != Some(&EOS) {
                return Err(Error::Data(format!("sample {}: caption not EOS-terminated", self.id)));
            }
            if c.iter().any(|&id| id as usize >= vocab.len()) {
                return Err(Error::Data(format!("sample {}: caption id outside vocabulary", self.id)));
            }
        }
        Ok(())
    }
}

fn format_float(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v}")
}

/// Writes a feature matrix: header `n d`, then one row per line.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (n, d) = (features.rows(), features.cols());
    let mut text = format!("{n} {d}\n");
    for r in 0..n {
        let row: Vec<String> = features.row_slice(r).iter().map(|&v| format_float(v)).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a feature matrix, reporting the offending row on any mismatch.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty feature file", path.display())))?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}:1: malformed header `{header}`", path.display())))?;
    let d: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}:1: malformed header `{header}`", path.display())))?;
    if n == 0 || d == 0 {
        return Err(Error::Data(format!("{}:1: header must declare n >= 1 and d >= 1", path.display())));
    }
    let mut values = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(|s| s.parse::<f64>()).collect();
        let row = row.map_err(|_| {
            Error::Data(format!("{}:{}: unparsable feature value", path.display(), lineno + 1))
        })?;
        if row.len() != d {
            return Err(Error::Data(format!(
                "{}:{}: row has {} values, header declares {d}",
                path.display(),
                lineno + 1,
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::Data(format!(
            "{}: header declares {n} rows, found {rows}",
            path.display()
        )));
    }
    Tensor::new(vec![n, d], values)
}

/// Writes captions as surface tokens, one caption per line. The trailing
/// EOS id is represented by the line ending, not a token.
pub fn write_captions(path: &Path, captions: &[Vec<u32>], vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for c in captions {
        let surface: Vec<&str> = c
            .iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| vocab.token(id).unwrap_or("<unk>"))
            .collect();
        text.push_str(&surface.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads captions, appending EOS to each and rejecting unknown tokens with
/// the file and line of the offense.
pub fn read_captions(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut captions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let mut ids = vocab.encode_strict(&words).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        ids.push(EOS);
        captions.push(ids);
    }
    if captions.is_empty() {
        return Err(Error::Data(format!("{}: no captions", path.display())));
    }
    Ok(captions)
}

/// Writes one split: per-sample feature and caption files under the dataset
/// directory plus `<split>.manifest` and `vocab.txt`.
pub fn save_dataset(dir: &Path, split: &str, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("captions")).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    let manifest_path = dir.join(format!("{split}.manifest"));
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for sample in samples {
        let mut fields = vec![sample.id.clone()];
        for stream in &sample.streams {
            let rel = format!("features/{}.{}.txt", sample.id, stream.name);
            write_features(&dir.join(&rel), &stream.features)?;
            fields.push(format!("{}={rel}", stream.name));
        }
        let cap_rel = format!("captions/{}.txt", sample.id);
        write_captions(&dir.join(&cap_rel), &sample.captions, vocab)?;
        fields.push(format!("captions={cap_rel}"));
        writeln!(manifest, "{}", fields.join("\t")).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

/// Loads one split from its manifest; the vocabulary is read from
/// `vocab.txt` next to the manifest. All paths in the manifest are relative
/// to the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<(Vec<Sample>, Vocabulary)> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Data(format!("{}:{}: missing sample id", manifest.display(), lineno + 1)))?
            .to_string();
        let mut streams = Vec::new();
        let mut captions: Option<PathBuf> = None;
        for field in fields {
            let (key, rel) = field.split_once('=').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: malformed field `{field}` (expected name=path)",
                    manifest.display(),
                    lineno + 1
                ))
            })?;
            if key == "captions" {
                captions = Some(dir.join(rel));
            } else {
                let features = read_features(&dir.join(rel))?;
                streams.push(ModalityStream::new(key, features));
            }
        }
        let captions_path = captions.ok_or_else(|| {
            Error::Data(format!("{}:{}: sample {id} has no captions field", manifest.display(), lineno + 1))
        })?;
        let captions = read_captions(&captions_path, &vocab)?;
        let sample = Sample {
            id,
            streams,
            captions,
        };
        sample.validate(&vocab)?;
        samples.push(sample);
    }
    Ok((samples, vocab))
}

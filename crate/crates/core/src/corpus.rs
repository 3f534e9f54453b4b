//! Paired corpus container and its on-disk format.
//!
//! A corpus directory holds `manifest.json` plus two binary payloads:
//!
//! ```text
//! manifest.json   {"version":1,"D":64,"n_v":8,"n_t":8,"pair_count":2000,"dtype":"f32le"}
//! images.bin      pair_count * n_v * D little-endian f32, row-major [pair, token, col]
//! texts.bin       pair_count * n_t * D little-endian f32, same layout
//! ```
//!
//! Values are stored as f32; the in-memory corpus widens them to f64, so a
//! save/load cycle is bit-exact for data that originated as f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const CORPUS_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    #[serde(rename = "D")]
    pub d: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub pair_count: usize,
    pub dtype: String,
}

/// Matched image/text pairs; entry i of `images` pairs with entry i of
/// `texts`, and instance ids equal the pair index.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub d: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub images: Vec<EmbeddingSet>,
    pub texts: Vec<EmbeddingSet>,
}

impl Corpus {
    pub fn new(d: usize, n_v: usize, n_t: usize) -> Self {
        Corpus { d, n_v, n_t, images: Vec::new(), texts: Vec::new() }
    }

    pub fn pair_count(&self) -> usize {
        self.images.len()
    }

    pub fn push_pair(&mut self, image_tokens: Mat, text_tokens: Mat) -> Result<()> {
        if image_tokens.rows() != self.n_v || image_tokens.cols() != self.d {
            return Err(Error::Shape(format!(
                "image tokens {}x{}, corpus expects {}x{}",
                image_tokens.rows(),
                image_tokens.cols(),
                self.n_v,
                self.d
            )));
        }
        if text_tokens.rows() != self.n_t || text_tokens.cols() != self.d {
            return Err(Error::Shape(format!(
                "text tokens {}x{}, corpus expects {}x{}",
                text_tokens.rows(),
                text_tokens.cols(),
                self.n_t,
                self.d
            )));
        }
        let id = self.images.len();
        self.images.push(EmbeddingSet::new(Modality::Image, image_tokens, id));
        self.texts.push(EmbeddingSet::new(Modality::Text, text_tokens, id));
        Ok(())
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            version: CORPUS_VERSION,
            d: self.d,
            n_v: self.n_v,
            n_t: self.n_t,
            pair_count: self.pair_count(),
            dtype: DTYPE_F32LE.to_string(),
        }
    }
}

/// Write a sequence of equally shaped matrices as one packed f32le payload.
pub fn write_f32le<P: AsRef<Path>>(path: P, mats: &[&Mat]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    for m in mats {
        for &v in m.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read `count` matrices of shape rows x cols from a packed f32le payload.
pub fn read_f32le<P: AsRef<Path>>(
    path: P,
    count: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<Mat>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = count * rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::corrupt(
            path.display().to_string(),
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut mats = Vec::with_capacity(count);
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for _ in 0..count {
        let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
        mats.push(Mat::from_vec(rows, cols, data)?);
    }
    Ok(mats)
}

pub fn save_corpus<P: AsRef<Path>>(corpus: &Corpus, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&corpus.manifest())?;
    fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let image_mats: Vec<&Mat> = corpus.images.iter().map(|s| &s.tokens).collect();
    let text_mats: Vec<&Mat> = corpus.texts.iter().map(|s| &s.tokens).collect();
    write_f32le(dir.join("images.bin"), &image_mats)?;
    write_f32le(dir.join("texts.bin"), &text_mats)?;
    Ok(())
}

pub fn load_corpus<P: AsRef<Path>>(dir: P) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: CorpusManifest = serde_json::from_str(&raw).map_err(|e| {
        Error::corrupt(manifest_path.display().to_string(), format!("bad manifest: {e}"))
    })?;
    if manifest.version != CORPUS_VERSION {
        return Err(Error::corrupt(
            manifest_path.display().to_string(),
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(Error::corrupt(
            manifest_path.display().to_string(),
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let images = read_f32le(dir.join("images.bin"), manifest.pair_count, manifest.n_v, manifest.d)?;
    let texts = read_f32le(dir.join("texts.bin"), manifest.pair_count, manifest.n_t, manifest.d)?;
    let mut corpus = Corpus::new(manifest.d, manifest.n_v, manifest.n_t);
    for (img, txt) in images.into_iter().zip(texts) {
        corpus.push_pair(img, txt)?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quantized(vals: Vec<f64>) -> Vec<f64> {
        vals.into_iter().map(|v| v as f32 as f64).collect()
    }

    fn sample_corpus() -> Corpus {
        let mut c = Corpus::new(3, 2, 2);
        c.push_pair(
            Mat::from_vec(2, 3, quantized(vec![0.1, -0.2, 0.3, 1.5, 2.5, -3.5])).unwrap(),
            Mat::from_vec(2, 3, quantized(vec![9.0, 8.0, 7.0, -6.0, 5.0, 4.0])).unwrap(),
        )
        .unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sample_corpus();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.images[0].tokens, loaded.images[0].tokens);
        assert_eq!(corpus.texts[0].tokens, loaded.texts[0].tokens);
        // Byte-level check: saving the loaded corpus reproduces the files.
        let dir2 = tempfile::tempdir().unwrap();
        save_corpus(&loaded, dir2.path()).unwrap();
        for name in ["images.bin", "texts.bin", "manifest.json"] {
            let a = fs::read(dir.path().join(name)).unwrap();
            let b = fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after round trip");
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&sample_corpus(), dir.path()).unwrap();
        let path = dir.path().join("images.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Corrupt { .. }) => {}
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn bad_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&sample_corpus(), dir.path()).unwrap();
        fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
        assert!(load_corpus(dir.path()).is_err());

        let mut manifest = sample_corpus().manifest();
        manifest.version = 99;
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn payload_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let m = Mat::from_vec(3, 4, vals.iter().map(|&v| v as f64).collect()).unwrap();
            write_f32le(dir.path().join("m.bin"), &[&m]).unwrap();
            let back = read_f32le(dir.path().join("m.bin"), 1, 3, 4).unwrap();
            prop_assert_eq!(m, back[0].clone());
        }
    }
}

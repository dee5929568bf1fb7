//! Template gallery: enrollment, cosine matching and encrypted storage.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MIN_DIM: usize = 8;
pub const NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_FACE_THRESHOLD: f64 = 0.35;

pub const CONTAINER_MAGIC: [u8; 4] = *b"CHGX";
pub const KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GalleryError {
    #[error("dimension {0} is below the minimum of {MIN_DIM}")]
    BadDimension(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
    #[error("top_k must be >= 1")]
    BadTopK,
    #[error("authentication failed")]
    AuthFailure,
    #[error("key must be {KEY_LEN} bytes (got {0})")]
    BadKey(usize),
    #[error("malformed container: {0}")]
    Malformed(&'static str),
    #[error("gallery serialization: {0}")]
    Serde(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Face,
    Gait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct Template {
    subject_id: String,
    modality: Modality,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTemplate {
    subject_id: String,
    modality: Modality,
    embedding: Vec<f64>,
}

impl TryFrom<RawTemplate> for Template {
    type Error = GalleryError;
    fn try_from(raw: RawTemplate) -> Result<Self, GalleryError> {
        Template::new(raw.subject_id, raw.modality, raw.embedding)
    }
}

impl Template {
    /// Wraps an embedding that is already unit length.
    pub fn new(subject_id: impl Into<String>, modality: Modality, embedding: Vec<f64>) -> Result<Self, GalleryError> {
        if embedding.len() < MIN_DIM {
            return Err(GalleryError::BadDimension(embedding.len()));
        }
        let norm = l2(&embedding);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(GalleryError::NotUnitNorm(norm));
        }
        Ok(Template {
            subject_id: subject_id.into(),
            modality,
            embedding,
        })
    }

    /// Normalizes a raw embedding of any positive length.
    pub fn from_raw(subject_id: impl Into<String>, modality: Modality, raw: &[f64]) -> Result<Self, GalleryError> {
        if raw.len() < MIN_DIM {
            return Err(GalleryError::BadDimension(raw.len()));
        }
        let norm = l2(raw);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(GalleryError::ZeroVector);
        }
        Template::new(subject_id, modality, raw.iter().map(|x| x / norm).collect())
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic stand-in for a face or gait embedding network: a Gaussian
/// vector seeded from the subject id, normalized to unit length.
pub fn embed(subject_id: &str, d: usize) -> Result<Vec<f64>, GalleryError> {
    if d < MIN_DIM {
        return Err(GalleryError::BadDimension(d));
    }
    let digest = Sha256::digest(subject_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = l2(&raw);
    Ok(raw.into_iter().map(|x| x / norm).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, GalleryError> {
    if u.len() != v.len() {
        return Err(GalleryError::DimensionMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (l2(u), l2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(GalleryError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub subject_id: String,
    pub score: f64,
    pub rank: u32,
}

/// Immutable set of enrolled templates. Enrollment returns a new value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gallery {
    templates: Vec<Template>,
}

impl Gallery {
    pub fn new(templates: Vec<Template>) -> Self {
        Gallery { templates }
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn enroll(&self, template: Template) -> Gallery {
        let mut templates = self.templates.clone();
        templates.push(template);
        Gallery { templates }
    }

    /// Exhaustive scan: the `top_k` best templates scoring at least
    /// `threshold`, best first, ties broken by subject id.
    pub fn match_probe(&self, probe: &Template, top_k: usize, threshold: f64) -> Result<Vec<MatchResult>, GalleryError> {
        if top_k < 1 {
            return Err(GalleryError::BadTopK);
        }
        let mut scored = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            let score = cosine(probe.embedding(), t.embedding())?;
            if score >= threshold {
                scored.push((t.subject_id.as_str(), score));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(scored
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, (id, score))| MatchResult {
                subject_id: id.to_string(),
                score,
                rank: i as u32 + 1,
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<Vec<u8>, GalleryError> {
        serde_json::to_vec(self).map_err(|e| GalleryError::Serde(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, GalleryError> {
        serde_json::from_slice(bytes).map_err(|e| GalleryError::Serde(e.to_string()))
    }

    /// A gallery of `subjects` enrolled with [`embed`], ids `subject-0000`...
    pub fn synthetic(subjects: u32, d: usize) -> Result<Self, GalleryError> {
        (0..subjects)
            .map(|k| {
                let id = subject_label(k);
                let v = embed(&id, d)?;
                Template::new(id, Modality::Face, v)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Gallery::new)
    }
}

/// Subject identity string for the integer tag carried in detection boxes.
pub fn subject_label(k: u32) -> String {
    format!("subject-{k:04}")
}

// ---------------------------------------------------------------------------
// encrypted container

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedGallery {
    pub key_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

fn cipher(key: &[u8]) -> Result<ChaCha20Poly1305, GalleryError> {
    if key.len() != KEY_LEN {
        return Err(GalleryError::BadKey(key.len()));
    }
    Ok(ChaCha20Poly1305::new(Key::from_slice(key)))
}

fn associated_data(key_id: &str) -> Vec<u8> {
    let mut aad = CONTAINER_MAGIC.to_vec();
    aad.extend_from_slice(key_id.as_bytes());
    aad
}

/// Seals the JSON form of `gallery` with ChaCha20-Poly1305 under a fresh
/// random nonce. The key id is bound as associated data.
pub fn encrypt_gallery<R: RngCore + CryptoRng>(
    gallery: &Gallery,
    key_id: &str,
    key: &[u8],
    rng: &mut R,
) -> Result<EncryptedGallery, GalleryError> {
    let aead = cipher(key)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let plaintext = gallery.to_json()?;
    let aad = associated_data(key_id);
    let mut sealed = aead
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plaintext, aad: &aad })
        .map_err(|_| GalleryError::AuthFailure)?;
    let tag_bytes = sealed.split_off(sealed.len() - TAG_LEN);
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&tag_bytes);
    Ok(EncryptedGallery {
        key_id: key_id.to_string(),
        nonce,
        tag,
        ciphertext: sealed,
    })
}

pub fn decrypt_gallery(sealed: &EncryptedGallery, key: &[u8]) -> Result<Gallery, GalleryError> {
    let aead = cipher(key)?;
    let mut combined = sealed.ciphertext.clone();
    combined.extend_from_slice(&sealed.tag);
    let aad = associated_data(&sealed.key_id);
    let plaintext = aead
        .decrypt(Nonce::from_slice(&sealed.nonce), Payload { msg: &combined, aad: &aad })
        .map_err(|_| GalleryError::AuthFailure)?;
    Gallery::from_json(&plaintext)
}

impl EncryptedGallery {
    /// `CHGX`, then key id, nonce, tag and ciphertext, each prefixed with a
    /// big-endian u32 length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CONTAINER_MAGIC.to_vec();
        for field in [self.key_id.as_bytes(), &self.nonce, &self.tag, &self.ciphertext] {
            out.extend_from_slice(&(field.len() as u32).to_be_bytes());
            out.extend_from_slice(field);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GalleryError> {
        let rest = bytes
            .strip_prefix(&CONTAINER_MAGIC)
            .ok_or(GalleryError::Malformed("bad magic"))?;
        let mut fields = Vec::with_capacity(4);
        let mut rest = rest;
        for _ in 0..4 {
            if rest.len() < 4 {
                return Err(GalleryError::Malformed("truncated length"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            rest = &rest[4..];
            if rest.len() < len {
                return Err(GalleryError::Malformed("truncated field"));
            }
            fields.push(&rest[..len]);
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(GalleryError::Malformed("trailing bytes"));
        }
        let key_id = String::from_utf8(fields[0].to_vec()).map_err(|_| GalleryError::Malformed("key id"))?;
        let nonce = fields[1].try_into().map_err(|_| GalleryError::Malformed("nonce length"))?;
        let tag = fields[2].try_into().map_err(|_| GalleryError::Malformed("tag length"))?;
        Ok(EncryptedGallery {
            key_id,
            nonce,
            tag,
            ciphertext: fields[3].to_vec(),
        })
    }
}

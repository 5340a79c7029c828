//! On-disk formats: the binary checkpoint, the embedding gallery, and the
//! scene dataset as JSON lines.
//!
//! Every writer serializes to memory first and lands on disk through a
//! same-directory temp file plus rename, so a failed run never leaves a
//! partial file at the target path and rewriting identical content is
//! byte-idempotent.

use crate::encoder::{EncoderConfig, EncoderError, EncoderParams};
use crate::layout::Vocabulary;
use crate::scenegen::Scene;
use crate::trainer::Checkpoint;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OBCK";
pub const GALLERY_MAGIC: [u8; 4] = *b"OBEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unrecognized {kind}: bad magic")]
    BadMagic { kind: &'static str },
    #[error("unrecognized {kind}: version {found} (this build reads version {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("corrupt {kind} file: {detail}")]
    Corrupt { kind: &'static str, detail: String },
    #[error("cannot serialize {kind}: {detail}")]
    Invalid { kind: &'static str, detail: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

fn corrupt(kind: &'static str, detail: impl Into<String>) -> IoError {
    IoError::Corrupt {
        kind,
        detail: detail.into(),
    }
}

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".write")
        .suffix(".tmp")
        .tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint: magic, version, JSON header, raw little-endian f32 tensors.
// ---------------------------------------------------------------------------

/// JSON header carried inside a checkpoint. The manifest maps a tensor name
/// to its shape and byte offset within the data section that follows the
/// header; data is laid out in manifest (key-sorted) order. Optimizer
/// moments are tensors too, under `m.` / `v.` prefixes.
#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: EncoderConfig,
    step: u64,
    vocabulary: Vec<String>,
    manifest: BTreeMap<String, (Vec<usize>, u64)>,
}

fn named_slices<'a>(ck: &'a Checkpoint) -> Vec<(String, &'a [f32])> {
    let index = ck.params.tensor_index();
    let mut out = Vec::with_capacity(3 * index.len());
    for (set, prefix) in [(&ck.params, ""), (&ck.m, "m."), (&ck.v, "v.")] {
        for ((name, _), data) in index.iter().zip(set.tensors()) {
            out.push((format!("{prefix}{name}"), data));
        }
    }
    out
}

/// Serialize a checkpoint to its on-disk byte layout.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>, IoError> {
    let index = ck.params.tensor_index();
    let mut manifest: BTreeMap<String, (Vec<usize>, u64)> = BTreeMap::new();
    for (set_prefix, _) in [("", 0), ("m.", 1), ("v.", 2)] {
        for (name, shape) in &index {
            manifest.insert(format!("{set_prefix}{name}"), (shape.clone(), 0));
        }
    }
    // Offsets follow the manifest's own (sorted-key) order.
    let slices: BTreeMap<String, &[f32]> = named_slices(ck).into_iter().collect();
    let mut offset = 0u64;
    for (name, entry) in manifest.iter_mut() {
        entry.1 = offset;
        offset += (slices[name].len() * 4) as u64;
    }
    let header = CkptHeader {
        config: ck.params.cfg.clone(),
        step: ck.step,
        vocabulary: Vocabulary::build().tokens().to_vec(),
        manifest,
    };
    let json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for data in slices.values() {
        for &x in *data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), IoError> {
    let bytes = checkpoint_bytes(ck)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Parse a checkpoint from its on-disk byte layout.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, IoError> {
    const KIND: &str = "checkpoint";
    if bytes.len() < 12 {
        return Err(corrupt(KIND, "truncated header"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic { kind: KIND });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            kind: KIND,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = 12usize
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(KIND, "truncated JSON header"))?;
    let header: CkptHeader = serde_json::from_slice(&bytes[12..data_start])?;
    let data = &bytes[data_start..];

    let vocab = Vocabulary::build();
    if header.vocabulary != vocab.tokens() {
        return Err(corrupt(KIND, "vocabulary does not match this build"));
    }
    let params = EncoderParams::<f32>::init(header.config, vocab.len(), 0)?;
    let mut ck = Checkpoint {
        step: header.step,
        m: params.zeros_like(),
        v: params.zeros_like(),
        params,
    };

    let index = ck.params.tensor_index();
    let expected_entries = 3 * index.len();
    if header.manifest.len() != expected_entries {
        return Err(corrupt(
            KIND,
            format!(
                "manifest lists {} tensors, expected {}",
                header.manifest.len(),
                expected_entries
            ),
        ));
    }
    let mut total = 0usize;
    for (set, prefix) in [(&mut ck.params, ""), (&mut ck.m, "m."), (&mut ck.v, "v.")] {
        for ((name, shape), dst) in index.iter().zip(set.tensors_mut()) {
            let key = format!("{prefix}{name}");
            let (file_shape, offset) = header
                .manifest
                .get(&key)
                .ok_or_else(|| corrupt(KIND, format!("missing tensor {key}")))?;
            if file_shape != shape {
                return Err(corrupt(
                    KIND,
                    format!("tensor {key} has shape {file_shape:?}, expected {shape:?}"),
                ));
            }
            let len = dst.len() * 4;
            let start = usize::try_from(*offset)
                .ok()
                .filter(|&s| s.checked_add(len).is_some_and(|end| end <= data.len()))
                .ok_or_else(|| corrupt(KIND, format!("truncated tensor data for {key}")))?;
            for (i, chunk) in data[start..start + len].chunks_exact(4).enumerate() {
                dst[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            total += len;
        }
    }
    if total != data.len() {
        return Err(corrupt(
            KIND,
            format!("data section is {} bytes, manifest covers {}", data.len(), total),
        ));
    }
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Gallery: per-image object/global embeddings with boxes and quality logits.
// ---------------------------------------------------------------------------

/// One image's worth of embeddings. `objects` is row-major N×d,
/// `globals` is 2×d (coarse row then detailed row; configs with a single
/// global slot store the same row twice). Token modes without a quality
/// slot store `+inf` logits, which sigmoid to exactly 1 — an identity
/// quality factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub id: u64,
    pub boxes: Vec<[f32; 4]>,
    pub objects: Vec<f32>,
    pub iou_logits: Vec<f32>,
    pub globals: Vec<f32>,
}

impl GalleryEntry {
    pub fn n(&self) -> usize {
        self.boxes.len()
    }

    pub fn object(&self, j: usize, d: usize) -> &[f32] {
        &self.objects[j * d..(j + 1) * d]
    }

    pub fn global_coarse(&self, d: usize) -> &[f32] {
        &self.globals[..d]
    }

    pub fn global_detailed(&self, d: usize) -> &[f32] {
        &self.globals[d..]
    }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a gallery to its on-disk byte layout.
pub fn gallery_bytes(d_model: usize, entries: &[GalleryEntry]) -> Result<Vec<u8>, IoError> {
    let invalid = |detail: String| IoError::Invalid {
        kind: "gallery",
        detail,
    };
    if d_model == 0 || d_model > u32::MAX as usize {
        return Err(invalid(format!("bad embedding width {d_model}")));
    }
    if entries.len() > u32::MAX as usize {
        return Err(invalid("too many images".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&GALLERY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d_model as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let n = e.n();
        if n > u32::MAX as usize {
            return Err(invalid(format!("image {}: too many regions", e.id)));
        }
        if e.objects.len() != n * d_model
            || e.iou_logits.len() != n
            || e.globals.len() != 2 * d_model
        {
            return Err(invalid(format!(
                "image {}: field lengths disagree with {} boxes × width {}",
                e.id, n, d_model
            )));
        }
        out.extend_from_slice(&e.id.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for b in &e.boxes {
            push_f32s(&mut out, b);
        }
        push_f32s(&mut out, &e.objects);
        push_f32s(&mut out, &e.iou_logits);
        push_f32s(&mut out, &e.globals);
    }
    Ok(out)
}

pub fn write_gallery(path: &Path, d_model: usize, entries: &[GalleryEntry]) -> Result<(), IoError> {
    let bytes = gallery_bytes(d_model, entries)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.kind, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IoError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt(self.kind, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse a gallery file; returns the embedding width and the entries.
pub fn gallery_from_bytes(bytes: &[u8]) -> Result<(usize, Vec<GalleryEntry>), IoError> {
    const KIND: &str = "gallery";
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: KIND,
    };
    if r.take(4)? != GALLERY_MAGIC {
        return Err(IoError::BadMagic { kind: KIND });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            kind: KIND,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let d_model = r.u32()? as usize;
    if d_model == 0 {
        return Err(corrupt(KIND, "embedding width is zero"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = r.u64()?;
        let n = r.u32()? as usize;
        let mut boxes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let q = r.f32s(4)?;
            boxes.push([q[0], q[1], q[2], q[3]]);
        }
        entries.push(GalleryEntry {
            id,
            boxes,
            objects: r.f32s(n * d_model)?,
            iou_logits: r.f32s(n)?,
            globals: r.f32s(2 * d_model)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(KIND, "trailing bytes after last image"));
    }
    Ok((d_model, entries))
}

pub fn read_gallery(path: &Path) -> Result<(usize, Vec<GalleryEntry>), IoError> {
    gallery_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Scene dataset: one JSON object per line.
// ---------------------------------------------------------------------------

pub fn scenes_bytes(scenes: &[Scene]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    for scene in scenes {
        serde_json::to_writer(&mut out, scene)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), IoError> {
    let bytes = scenes_bytes(scenes)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(line)
            .map_err(|e| corrupt("scenes", format!("line {}: {e}", i + 1)))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, GenConfig};
    use crate::seeding::mix;

    fn small_checkpoint() -> Checkpoint {
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            grid_w: 16,
            grid_h: 16,
            grid_c: 8,
            patch: 8,
            roi_bins: 2,
            ..EncoderConfig::default()
        };
        let mut ck = Checkpoint::init(cfg, Vocabulary::build().len(), mix(3, 0x10, 0)).unwrap();
        ck.step = 7;
        // Distinct, irrational-ish moment values so a swapped or misaligned
        // tensor cannot round-trip by accident.
        for (ti, t) in ck.m.tensors_mut().into_iter().enumerate() {
            for (e, x) in t.iter_mut().enumerate() {
                *x = ((ti * 31 + e) as f32).sin() * 0.01;
            }
        }
        for (ti, t) in ck.v.tensors_mut().into_iter().enumerate() {
            for (e, x) in t.iter_mut().enumerate() {
                *x = ((ti * 17 + e) as f32).cos().abs() * 0.001;
            }
        }
        ck
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ck = small_checkpoint();
        let bytes = checkpoint_bytes(&ck).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        let again = checkpoint_bytes(&back).unwrap();
        assert_eq!(bytes, again, "save -> load -> save must reproduce bytes");
    }

    #[test]
    fn checkpoint_header_starts_with_magic_and_version() {
        let bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        assert_eq!(&bytes[..4], b"OBCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + json_len]).unwrap();
        assert!(header.get("config").is_some());
        assert!(header.get("vocabulary").is_some());
        assert_eq!(header["step"], 7);
        let manifest = header["manifest"].as_object().unwrap();
        assert!(manifest.contains_key("tok_embed"));
        assert!(manifest.contains_key("m.sim.a"));
        assert!(manifest.contains_key("v.layers.1.wq"));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        bytes[0] = b'X';
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unrecognized checkpoint"), "{err}");
    }

    #[test]
    fn future_version_is_an_explicit_version_error() {
        let mut bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        match err {
            IoError::Version { found, expected, .. } => {
                assert_eq!(found, 2);
                assert_eq!(expected, 1);
            }
            other => panic!("expected version error, got {other}"),
        }
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(IoError::Version { .. })
        ));
    }

    #[test]
    fn truncated_checkpoints_error_at_every_cut() {
        let bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        // Header, mid-JSON, and mid-tensor truncations must all fail.
        for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                checkpoint_from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut} bytes must not parse"
            );
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let bytes = checkpoint_bytes(&small_checkpoint()).unwrap();
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[12..12 + json_len]).unwrap();
        header["vocabulary"][0] = serde_json::Value::String("zebra".into());
        let new_json = serde_json::to_vec(&header).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..8]);
        tampered.extend_from_slice(&(new_json.len() as u32).to_le_bytes());
        tampered.extend_from_slice(&new_json);
        tampered.extend_from_slice(&bytes[12 + json_len..]);
        let err = checkpoint_from_bytes(&tampered).unwrap_err();
        assert!(err.to_string().contains("vocabulary"), "{err}");
    }

    #[test]
    fn checkpoint_save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.obck");
        let ck = small_checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ck, back);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| n.to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty(), "temp files must not survive: {leftovers:?}");
    }

    fn sample_gallery() -> (usize, Vec<GalleryEntry>) {
        let d = 4;
        let entries = vec![
            GalleryEntry {
                id: 11,
                boxes: vec![[1.0, 2.0, 3.5, 4.25], [0.0, 0.0, 8.0, 8.0]],
                objects: (0..2 * d).map(|i| i as f32 * 0.5).collect(),
                iou_logits: vec![-1.25, f32::INFINITY],
                globals: (0..2 * d).map(|i| -(i as f32)).collect(),
            },
            GalleryEntry {
                id: 12,
                boxes: vec![],
                objects: vec![],
                iou_logits: vec![],
                globals: vec![0.125; 2 * d],
            },
        ];
        (d, entries)
    }

    #[test]
    fn gallery_round_trip_is_bit_exact() {
        let (d, entries) = sample_gallery();
        let bytes = gallery_bytes(d, &entries).unwrap();
        assert_eq!(&bytes[..4], b"OBEM");
        let (d_back, back) = gallery_from_bytes(&bytes).unwrap();
        assert_eq!(d_back, d);
        assert_eq!(entries, back);
        assert_eq!(gallery_bytes(d_back, &back).unwrap(), bytes);
        assert!(back[0].iou_logits[1].is_infinite());
    }

    #[test]
    fn gallery_rejects_truncation_magic_and_mismatched_lengths() {
        let (d, entries) = sample_gallery();
        let bytes = gallery_bytes(d, &entries).unwrap();
        for cut in [2, 10, 20, bytes.len() - 1] {
            assert!(gallery_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[1] = b'?';
        assert!(matches!(
            gallery_from_bytes(&wrong),
            Err(IoError::BadMagic { .. })
        ));
        let mut bad = entries;
        bad[0].iou_logits.pop();
        assert!(gallery_bytes(d, &bad).is_err());
    }

    #[test]
    fn gallery_accessors_slice_rows() {
        let (d, entries) = sample_gallery();
        let e = &entries[0];
        assert_eq!(e.n(), 2);
        assert_eq!(e.object(1, d), &e.objects[d..]);
        assert_eq!(e.global_coarse(d).len(), d);
        assert_eq!(e.global_detailed(d), &e.globals[d..]);
    }

    #[test]
    fn scenes_round_trip_and_rewrite_identically() {
        let cfg = GenConfig {
            seed: 9,
            scenes: 12,
            grid_w: 16,
            grid_h: 16,
            max_objects: 2,
            proposals: 12,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        write_scenes(&path, &scenes).unwrap();
        let back = read_scenes(&path).unwrap();
        assert_eq!(scenes, back);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), scenes.len());
        write_scenes(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes, "rewrite must be byte-identical");
    }

    #[test]
    fn scene_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        fs::write(&path, "{\"id\": 0, \"w\": 8, \"h\": 8, \"objects\": [], \"short\": [], \"long\": [], \"proposals\": []}\nnot json\n").unwrap();
        let err = read_scenes(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        fs::write(&path, b"old").unwrap();
        atomic_write(&path, b"new content").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"new content");
    }
}

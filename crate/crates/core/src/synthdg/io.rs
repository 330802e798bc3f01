//! `VDG1` clip container plus JSON split manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Benchmark, BenchmarkSpec, ClipMeta};
use crate::error::{ApnError, Result};
use crate::pyramid::VideoClip;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"VDG1";
pub const VERSION: u32 = 1;
/// Bytes before the first clip record.
pub const HEADER_BYTES: usize = 12;
/// Fixed bytes of a clip record before its pixels.
pub const CLIP_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: BenchmarkSpec,
    pub source_train: Vec<usize>,
    pub source_val: Vec<usize>,
    /// Keyed by target domain id.
    pub targets: BTreeMap<usize, Vec<usize>>,
    pub clips: Vec<ClipMeta>,
}

impl Manifest {
    pub fn of(b: &Benchmark) -> Manifest {
        let ids = |v: &[VideoClip]| v.iter().map(|c| c.clip_id).collect::<Vec<_>>();
        Manifest {
            format: "VDG1".into(),
            version: VERSION,
            seed: b.spec.seed,
            spec: b.spec.clone(),
            source_train: ids(&b.source_train),
            source_val: ids(&b.source_val),
            targets: b.targets.iter().map(|(d, c)| (*d, ids(c))).collect(),
            clips: b.meta.clone(),
        }
    }
}

/// Sidecar location for a dataset file: `data.vdg` → `data.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn clip_record_bytes(clip: &VideoClip) -> usize {
    CLIP_HEADER_BYTES + 4 * clip.frames.len()
}

fn u16_dim(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| ApnError::Format(format!("{what} = {v} does not fit in u16")))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ApnError::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_clips<'a>(clips: impl IntoIterator<Item = &'a VideoClip>) -> Result<Vec<u8>> {
    let clips: Vec<&VideoClip> = clips.into_iter().collect();
    let total = HEADER_BYTES + clips.iter().map(|c| clip_record_bytes(c)).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(clips.len(), "clip count")?.to_le_bytes());
    for c in clips {
        let d = c.frames.dims();
        if d.len() != 4 {
            return Err(ApnError::Format(format!("clip {} frames have rank {}", c.clip_id, d.len())));
        }
        out.extend_from_slice(&u32_field(c.clip_id, "clip id")?.to_le_bytes());
        out.extend_from_slice(&u32_field(c.category, "category")?.to_le_bytes());
        out.extend_from_slice(&u32_field(c.domain_id, "domain")?.to_le_bytes());
        for (v, what) in d.iter().zip(["T", "H", "W", "C"]) {
            out.extend_from_slice(&u16_dim(*v, what)?.to_le_bytes());
        }
        for &v in c.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ApnError::Format(format!("truncated dataset at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn decode_clips(buf: &[u8]) -> Result<Vec<VideoClip>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ApnError::Format("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ApnError::Format(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()? as usize;
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let clip_id = r.u32()? as usize;
        let category = r.u32()? as usize;
        let domain_id = r.u32()? as usize;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u16()? as usize;
        }
        let len: usize = dims.iter().product();
        let raw = r.take(4 * len)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let frames = Tensor::new(&dims, data, DType::F32).map_err(|e| ApnError::Format(e.to_string()))?;
        clips.push(VideoClip { frames, category, domain_id, clip_id });
    }
    if r.pos != buf.len() {
        return Err(ApnError::Format(format!("{} trailing bytes after last clip", buf.len() - r.pos)));
    }
    Ok(clips)
}

/// Write every clip to `path` and the split manifest next to it.
pub fn write_dataset(b: &Benchmark, path: &Path) -> Result<()> {
    let bytes = encode_clips(b.all_clips())?;
    std::fs::write(path, bytes)?;
    let manifest = Manifest::of(b);
    std::fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&std::fs::read(manifest_path(path))?)?;
    if m.format != "VDG1" || m.version != VERSION {
        return Err(ApnError::Format(format!("manifest describes {} v{}", m.format, m.version)));
    }
    Ok(m)
}

pub fn read_dataset(path: &Path) -> Result<Benchmark> {
    let manifest = read_manifest(path)?;
    let clips = decode_clips(&std::fs::read(path)?)?;
    let mut by_id: HashMap<usize, VideoClip> = HashMap::with_capacity(clips.len());
    for c in clips {
        let id = c.clip_id;
        if by_id.insert(id, c).is_some() {
            return Err(ApnError::Format(format!("clip id {id} appears twice")));
        }
    }
    let mut pick = |ids: &[usize]| -> Result<Vec<VideoClip>> {
        ids.iter()
            .map(|id| by_id.remove(id).ok_or_else(|| ApnError::Format(format!("manifest lists missing clip {id}"))))
            .collect()
    };
    let source_train = pick(&manifest.source_train)?;
    let source_val = pick(&manifest.source_val)?;
    let mut targets = Vec::new();
    for (d, ids) in &manifest.targets {
        targets.push((*d, pick(ids)?));
    }
    if !by_id.is_empty() {
        return Err(ApnError::Format(format!("{} clips are not assigned to any split", by_id.len())));
    }
    Ok(Benchmark { spec: manifest.spec, source_train, source_val, targets, meta: manifest.clips })
}

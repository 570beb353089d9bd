//! Exports and inspects alignment tensors: the two marginalizations
//! (averaged over dimensions, averaged over target steps), per-dimension
//! slices, and deterministic grayscale heatmaps.
//!
//! Alignment files carry the magic `FGAT`: version, extents T', T, D as
//! little-endian u32, then 32-bit little-endian floats row-major
//! `[t'][t][d]`. A temporal alignment is stored with D = 1. Tokens and the
//! model fingerprint live in a flat-text sidecar next to the binary file.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::attention::AlignmentTensor;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FGAT_MAGIC: &[u8; 4] = b"FGAT";
const FGAT_VERSION: u32 = 1;

/// A decoded sentence's alignment with its tokens and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub alignment: AlignmentTensor,
    /// Model/config fingerprint the record was produced with.
    pub fingerprint: String,
}

impl AlignmentRecord {
    pub fn new(
        src_tokens: Vec<String>,
        tgt_tokens: Vec<String>,
        alignment: AlignmentTensor,
        fingerprint: String,
    ) -> Result<Self> {
        if alignment.source_len() != src_tokens.len() {
            return Err(Error::Contract(format!(
                "alignment covers {} source positions but {} tokens were given",
                alignment.source_len(),
                src_tokens.len()
            )));
        }
        if alignment.target_len() != tgt_tokens.len() {
            return Err(Error::Contract(format!(
                "alignment covers {} target steps but {} tokens were given",
                alignment.target_len(),
                tgt_tokens.len()
            )));
        }
        Ok(AlignmentRecord {
            src_tokens,
            tgt_tokens,
            alignment,
            fingerprint,
        })
    }

    pub fn is_fine_grained(&self) -> bool {
        self.alignment.is_fine_grained()
    }

    fn extents(&self) -> (usize, usize, usize) {
        (
            self.alignment.target_len(),
            self.alignment.source_len(),
            self.alignment.dim(),
        )
    }

    /// Weight at `(t', t, d)`; `d` must be 0 for temporal alignments.
    fn weight(&self, t_out: usize, t_src: usize, d: usize) -> f64 {
        match &self.alignment {
            AlignmentTensor::Temporal(m) => m.get(&[t_out, t_src]),
            AlignmentTensor::FineGrained(t) => t.get(&[t_out, t_src, d]),
        }
    }

    // ── FGAT binary format ──────────────────────────────────────────────

    pub fn to_fgat_bytes(&self) -> Vec<u8> {
        let (steps, src, dim) = self.extents();
        let mut out = Vec::new();
        out.extend_from_slice(FGAT_MAGIC);
        out.extend_from_slice(&FGAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(steps as u32).to_le_bytes());
        out.extend_from_slice(&(src as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        // Both layouts are already row-major [t'][t][d] with D = 1 for the
        // temporal case.
        for &v in self.alignment.tensor().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_fgat_bytes(bytes: &[u8], sidecar: &str) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != FGAT_MAGIC {
            return Err(Error::Format("not an alignment file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FGAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported alignment version {version}"
            )));
        }
        let steps = read_u32(&mut r)? as usize;
        let src = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let numel = steps * src * dim;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after alignment data".into()));
        }
        let alignment = if dim == 1 {
            AlignmentTensor::Temporal(Tensor::new(data, &[steps, src])?)
        } else {
            AlignmentTensor::FineGrained(Tensor::new(data, &[steps, src, dim])?)
        };

        let mut lines = sidecar.lines();
        let src_tokens: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("sidecar is missing the source token line".into()))?
            .split('\t')
            .map(str::to_owned)
            .collect();
        let tgt_tokens: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("sidecar is missing the target token line".into()))?
            .split('\t')
            .map(str::to_owned)
            .collect();
        let fingerprint = lines.next().unwrap_or_default().to_owned();
        AlignmentRecord::new(src_tokens, tgt_tokens, alignment, fingerprint)
    }

    fn sidecar_text(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            self.src_tokens.join("\t"),
            self.tgt_tokens.join("\t"),
            self.fingerprint
        )
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".txt");
        PathBuf::from(name)
    }

    /// Writes the binary tensor and its token sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_fgat_bytes())?;
        std::fs::write(Self::sidecar_path(path), self.sidecar_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let sidecar = std::fs::read_to_string(Self::sidecar_path(path))?;
        Self::from_fgat_bytes(&bytes, &sidecar)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("alignment file truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Alignment strength between source and target symbols, averaged over the
/// dimensions: `A[t'][t] = (1/D) Σ_d α`. For a temporal record this is the
/// matrix itself; the returned flag reports that pass-through.
pub fn avg_over_dims(rec: &AlignmentRecord) -> (Tensor, bool) {
    let (steps, src, dim) = rec.extents();
    // Accumulate over d in ascending order and divide once, the same
    // arithmetic order as averaging the per-dimension slices.
    let mut data = vec![0.0; steps * src];
    for t_out in 0..steps {
        for t_src in 0..src {
            let mut acc = 0.0;
            for d in 0..dim {
                acc += rec.weight(t_out, t_src, d);
            }
            data[t_out * src + t_src] = acc / dim as f64;
        }
    }
    let matrix = Tensor::new(data, &[steps, src]).expect("extents are positive");
    (matrix, !rec.is_fine_grained())
}

/// Per-source-word dimension profile, averaged over the target:
/// `A[t][d] = (1/T') Σ_t' α`.
pub fn avg_over_target(rec: &AlignmentRecord) -> (Tensor, bool) {
    let (steps, src, dim) = rec.extents();
    let mut data = vec![0.0; src * dim];
    for t_src in 0..src {
        for d in 0..dim {
            let mut acc = 0.0;
            for t_out in 0..steps {
                acc += rec.weight(t_out, t_src, d);
            }
            data[t_src * dim + d] = acc / steps as f64;
        }
    }
    let matrix = Tensor::new(data, &[src, dim]).expect("extents are positive");
    (matrix, !rec.is_fine_grained())
}

/// The `d`-th slice of the tensor: a `[T'×T]` matrix whose rows lie on the
/// simplex.
pub fn slice_dim(rec: &AlignmentRecord, d: usize) -> Result<Tensor> {
    let (steps, src, dim) = rec.extents();
    if d >= dim {
        return Err(Error::Index(format!(
            "dimension {d} out of range for {dim} dimensions"
        )));
    }
    let mut data = vec![0.0; steps * src];
    for t_out in 0..steps {
        for t_src in 0..src {
            data[t_out * src + t_src] = rec.weight(t_out, t_src, d);
        }
    }
    Tensor::new(data, &[steps, src])
}

/// The `k` dimensions with the most attention mass at source position `t`,
/// ranked by the target-averaged profile, ties broken by dimension index.
pub fn top_dims(rec: &AlignmentRecord, t: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let (_, src, dim) = rec.extents();
    if t >= src {
        return Err(Error::Index(format!(
            "source position {t} out of range for {src} positions"
        )));
    }
    if k > dim {
        return Err(Error::Contract(format!(
            "cannot rank {k} dimensions out of {dim}"
        )));
    }
    let (profile, _) = avg_over_target(rec);
    let mut ranked: Vec<(usize, f64)> = (0..dim).map(|d| (d, profile.get(&[t, d]))).collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("alignment masses are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Renders a matrix as a binary portable graymap (P5), one pixel per cell:
/// the minimum maps to 0, the maximum to 255, and a constant matrix to a
/// uniform 128.
pub fn render_pgm(matrix: &Tensor) -> Result<Vec<u8>> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return Err(Error::dimension("render_pgm", shape, &[]));
    }
    if !matrix.is_finite() {
        return Err(Error::Numeric("heatmap input is not finite".into()));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let min = matrix.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = matrix
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    if max > min {
        let scale = 255.0 / (max - min);
        out.extend(
            matrix
                .data()
                .iter()
                .map(|&v| ((v - min) * scale).round() as u8),
        );
    } else {
        out.extend(std::iter::repeat(128u8).take(rows * cols));
    }
    Ok(out)
}

/// Writes the P5 heatmap plus a flat-text label sidecar: one tab-separated
/// line of row labels, one of column labels.
pub fn heatmap(
    matrix: &Tensor,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<()> {
    let shape = matrix.shape();
    if shape.len() != 2 || row_labels.len() != shape[0] || col_labels.len() != shape[1] {
        return Err(Error::Contract(format!(
            "labels ({}, {}) do not match matrix shape {:?}",
            row_labels.len(),
            col_labels.len(),
            shape
        )));
    }
    std::fs::write(path, render_pgm(matrix)?)?;
    let sidecar = format!("{}\n{}\n", row_labels.join("\t"), col_labels.join("\t"));
    let mut sidecar_path = path.as_os_str().to_owned();
    sidecar_path.push(".labels");
    std::fs::write(PathBuf::from(sidecar_path), sidecar)?;
    Ok(())
}

/// Convenience labels "d0", "d1", … for dimension axes.
pub fn dim_labels(n: usize) -> Vec<String> {
    (0..n).map(|d| format!("d{d}")).collect()
}

//! Embedding sequences: the ESEQ1 file format, a seeded synthetic
//! generator, strided windowing and dataset splits.
//!
//! ESEQ1 layout (all little-endian): `"ESEQ"`, `u32` version = 1, `u32` d,
//! `u32` sequence count, then per sequence a `u32` length T followed by
//! `T·d` `f32` values.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ESEQ_MAGIC: &[u8; 4] = b"ESEQ";
pub const ESEQ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequenceFile {
    pub d: usize,
    /// Each sequence is `T·d` row-major values.
    pub sequences: Vec<Vec<f32>>,
}

impl EmbeddingSequenceFile {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            sequences: Vec::new(),
        }
    }

    pub fn len(&self, seq: usize) -> usize {
        self.sequences[seq].len() / self.d
    }

    pub fn frame(&self, seq: usize, t: usize) -> &[f32] {
        &self.sequences[seq][t * self.d..(t + 1) * self.d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.sequences.iter().map(|s| 4 + 4 * s.len()).sum();
        let mut out = Vec::with_capacity(16 + total);
        out.extend_from_slice(ESEQ_MAGIC);
        out.extend_from_slice(&ESEQ_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        for s in &self.sequences {
            out.extend_from_slice(&((s.len() / self.d) as u32).to_le_bytes());
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(ESEQ_MAGIC.as_slice()) {
            return Err(FormatError::BadMagic { expected: "ESEQ" });
        }
        let version = r.u32()?;
        if version != ESEQ_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: ESEQ_VERSION,
            });
        }
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(FormatError::Malformed("d must be positive".into()));
        }
        let count = r.u32()? as usize;
        let mut sequences = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let t = r.u32()? as usize;
            let n = t
                .checked_mul(d)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FormatError::Malformed("sequence size overflows".into()))?;
            let raw = r.take(n)?;
            sequences.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        r.finish()?;
        Ok(Self { d, sequences })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(self) -> std::result::Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes(extra)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub d: usize,
    pub num_sequences: usize,
    pub length: usize,
    /// One rotation angle (radians per frame) per 2-D plane; drawn
    /// uniformly from `[0, theta_max)` when `None`.
    pub thetas: Option<Vec<f64>>,
    pub theta_max: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 32,
            num_sequences: 64,
            length: 128,
            thetas: None,
            theta_max: 0.5,
            sigma: 0.05,
            seed: 2023,
        }
    }
}

/// `z₀ ~ N(0, I)`, `z_{t+1} = R·z_t` with `R` block-diagonal 2×2 rotations,
/// `e_t = z_t + N(0, σ²)`. Draw order: plane angles, then per sequence the
/// latent followed by each frame's noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingSequenceFile> {
    if cfg.d == 0 || cfg.d % 2 != 0 {
        return Err(Error::Config(format!("synthetic d must be even, got {}", cfg.d)));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be >= 0, got {}", cfg.sigma)));
    }
    let planes = cfg.d / 2;
    let mut rng = Rng::seed(cfg.seed);
    let thetas = match &cfg.thetas {
        Some(t) if t.len() == planes => t.clone(),
        Some(t) => {
            return Err(Error::Config(format!("expected {planes} rotation angles, got {}", t.len())));
        }
        None => (0..planes).map(|_| rng.uniform_range(0.0, cfg.theta_max)).collect(),
    };
    let rot: Vec<(f64, f64)> = thetas.iter().map(|t| (t.cos(), t.sin())).collect();
    let mut file = EmbeddingSequenceFile::new(cfg.d);
    for _ in 0..cfg.num_sequences {
        let mut z: Vec<f64> = (0..cfg.d).map(|_| rng.gaussian()).collect();
        let mut seq = Vec::with_capacity(cfg.length * cfg.d);
        for _ in 0..cfg.length {
            for &zi in &z {
                let noise = if cfg.sigma > 0.0 { cfg.sigma * rng.gaussian() } else { 0.0 };
                seq.push((zi + noise) as f32);
            }
            for (p, &(c, s)) in rot.iter().enumerate() {
                let (a, b) = (z[2 * p], z[2 * p + 1]);
                z[2 * p] = c * a - s * b;
                z[2 * p + 1] = s * a + c * b;
            }
        }
        file.sequences.push(seq);
    }
    Ok(file)
}

/// Reads a plain CSV of embeddings: one frame per line, `d` comma-separated
/// decimals; blank lines separate sequences.
pub fn import_csv(text: &str) -> Result<EmbeddingSequenceFile> {
    let mut d = None;
    let mut sequences = Vec::new();
    let mut current: Vec<f32> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                sequences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let values = line
            .split(',')
            .map(|f| f.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("line {}: non-finite value", lineno + 1)));
        }
        match d {
            None => d = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Data(format!(
                    "line {}: expected {w} values, got {}",
                    lineno + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        current.extend(values);
    }
    if !current.is_empty() {
        sequences.push(current);
    }
    let d = d.ok_or_else(|| Error::Data("csv contains no frames".into()))?;
    Ok(EmbeddingSequenceFile { d, sequences })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub sequence: usize,
    pub start: usize,
    pub stride: usize,
}

impl Provenance {
    /// Source frame index of input `i` (or of the label when `i == M`).
    pub fn frame_index(&self, i: usize) -> usize {
        self.start + i * self.stride
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowInstance {
    /// M×d
    pub inputs: Tensor,
    /// 1×d
    pub label: Tensor,
    pub provenance: Provenance,
}

fn frames_tensor(file: &EmbeddingSequenceFile, seq: usize, idx: impl Iterator<Item = usize>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for t in idx {
        data.extend(file.frame(seq, t).iter().map(|&v| v as f64));
        rows += 1;
    }
    Tensor::new(&[rows, file.d], data).expect("frame shape")
}

/// All windows `s, s+stride, …, s+M·stride` (M inputs, then the label) within
/// each sequence. With `disjoint`, consecutive windows do not share frames.
pub fn make_windows(file: &EmbeddingSequenceFile, m: usize, stride: usize, disjoint: bool) -> Vec<WindowInstance> {
    let stride = stride.max(1);
    let span = m * stride;
    let step = if disjoint { span + 1 } else { 1 };
    let mut out = Vec::new();
    for seq in 0..file.sequences.len() {
        let t = file.len(seq);
        if t <= span {
            continue;
        }
        for start in (0..t - span).step_by(step) {
            let provenance = Provenance {
                sequence: seq,
                start,
                stride,
            };
            out.push(WindowInstance {
                inputs: frames_tensor(file, seq, (0..m).map(|i| provenance.frame_index(i))),
                label: frames_tensor(file, seq, std::iter::once(provenance.frame_index(m))),
                provenance,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    Ok(())
}

fn cut(order: Vec<usize>, ratios: [f64; 3]) -> SplitIndices {
    let n = order.len();
    let n_train = ((n as f64 * ratios[0]) + 1e-9).floor() as usize;
    let n_val = (((n as f64 * ratios[1]) + 1e-9).floor() as usize).min(n - n_train);
    SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Seeded Fisher–Yates shuffle of instance indices, then a contiguous cut:
/// `floor(n·r_train)`, `floor(n·r_val)`, remainder to test.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if n == 0 {
        return Err(Error::Data("cannot split an empty instance set".into()));
    }
    check_ratios(ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::seed(seed).shuffle(&mut order);
    Ok(cut(order, ratios))
}

/// Splits whole sequences, then assigns every window of a sequence to that
/// sequence's partition.
pub fn split_by_sequence(instances: &[WindowInstance], ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if instances.is_empty() {
        return Err(Error::Data("cannot split an empty instance set".into()));
    }
    let mut seqs: Vec<usize> = instances.iter().map(|w| w.provenance.sequence).collect();
    seqs.sort_unstable();
    seqs.dedup();
    let parts = split(seqs.len(), ratios, seed)?;
    let mut which = std::collections::HashMap::new();
    for (part, idx) in [(0, &parts.train), (1, &parts.val), (2, &parts.test)] {
        for &i in idx {
            which.insert(seqs[i], part);
        }
    }
    let mut out = SplitIndices::default();
    for (i, w) in instances.iter().enumerate() {
        match which[&w.provenance.sequence] {
            0 => out.train.push(i),
            1 => out.val.push(i),
            _ => out.test.push(i),
        }
    }
    Ok(out)
}

/// Windows of one file together with their train/val/test partition.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    pub file: EmbeddingSequenceFile,
    pub instances: Vec<WindowInstance>,
    pub split: SplitIndices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl EmbeddingDataset {
    pub fn build(file: EmbeddingSequenceFile, m: usize, spec: &crate::config::DataSpec) -> Result<Self> {
        let instances = make_windows(&file, m, spec.stride, spec.disjoint_windows);
        let split = if spec.split_by_sequence {
            split_by_sequence(&instances, spec.ratios, spec.split_seed)?
        } else {
            split(instances.len(), spec.ratios, spec.split_seed)?
        };
        Ok(Self { file, instances, split })
    }

    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn subset(&self, which: SplitName) -> Vec<&WindowInstance> {
        self.indices(which).iter().map(|&i| &self.instances[i]).collect()
    }

    /// Ground-truth frame `k` steps after the window's label (k = 0 is the label).
    pub fn future_frame(&self, w: &WindowInstance, k: usize) -> Option<Vec<f64>> {
        let p = w.provenance;
        let idx = p.frame_index(w.inputs.rows() + k);
        (idx < self.file.len(p.sequence)).then(|| self.file.frame(p.sequence, idx).iter().map(|&v| v as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_file(lengths: &[usize], d: usize) -> EmbeddingSequenceFile {
        let mut f = EmbeddingSequenceFile::new(d);
        for (s, &t) in lengths.iter().enumerate() {
            f.sequences
                .push((0..t * d).map(|i| (s * 1000 + i / d) as f32).collect());
        }
        f
    }

    #[test]
    fn format_errors_are_distinct() {
        assert_eq!(
            EmbeddingSequenceFile::from_bytes(&[]),
            Err(FormatError::BadMagic { expected: "ESEQ" })
        );
        let mut bytes = seq_file(&[3], 2).to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            EmbeddingSequenceFile::from_bytes(&bytes),
            Err(FormatError::VersionMismatch { found: 2, .. })
        ));
        let bytes = seq_file(&[3], 2).to_bytes();
        assert!(matches!(
            EmbeddingSequenceFile::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(EmbeddingSequenceFile::from_bytes(&extra), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn header_advertising_too_much_data_is_truncation() {
        let mut bytes = seq_file(&[3], 2).to_bytes();
        bytes[12] = 9; // claim nine sequences
        assert!(matches!(
            EmbeddingSequenceFile::from_bytes(&bytes),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn window_arithmetic() {
        let f = seq_file(&[26], 1);
        let w = make_windows(&f, 5, 5, false);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].inputs.data(), &[0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(w[0].label.data(), &[25.0]);
        let f = seq_file(&[6], 1);
        let w = make_windows(&f, 5, 1, false);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].inputs.data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(make_windows(&seq_file(&[25], 1), 5, 5, false).is_empty());
    }

    #[test]
    fn window_count_matches_enumeration() {
        let lengths = [0usize, 1, 5, 6, 11, 26, 40, 77];
        for stride in 1..=6 {
            for m in 1..=5 {
                let f = seq_file(&lengths.iter().map(|l| l.max(&1).to_owned()).collect::<Vec<_>>(), 1);
                let w = make_windows(&f, m, stride, false);
                let expected: usize = lengths
                    .iter()
                    .map(|&l| {
                        let t = l.max(1);
                        // brute force: count starts whose label index is in range
                        (0..t).filter(|s| s + m * stride < t).count()
                    })
                    .sum();
                assert_eq!(w.len(), expected);
                for x in &w {
                    let t = f.len(x.provenance.sequence);
                    assert!(x.provenance.frame_index(m) < t);
                }
            }
        }
    }

    #[test]
    fn disjoint_windows_share_no_frames() {
        let f = seq_file(&[100], 1);
        let w = make_windows(&f, 5, 5, true);
        for pair in w.windows(2) {
            assert!(pair[1].provenance.start > pair[0].provenance.frame_index(5));
        }
    }

    #[test]
    fn split_sizes() {
        let s = split(100, [0.7, 0.15, 0.15], 2023).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s = split(9, [0.7, 0.15, 0.15], 2023).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 2));
        assert!(split(0, [0.7, 0.15, 0.15], 1).is_err());
        assert!(split(10, [0.7, 0.2, 0.2], 1).is_err());
        assert_eq!(split(57, [0.7, 0.15, 0.15], 9).unwrap(), split(57, [0.7, 0.15, 0.15], 9).unwrap());
    }

    #[test]
    fn sequence_split_keeps_sequences_together() {
        let f = seq_file(&[12, 12, 12, 12, 12, 12, 12, 12, 12, 12], 1);
        let w = make_windows(&f, 2, 1, false);
        let s = split_by_sequence(&w, [0.7, 0.15, 0.15], 2023).unwrap();
        let seqs = |idx: &[usize]| idx.iter().map(|&i| w[i].provenance.sequence).collect::<std::collections::HashSet<_>>();
        assert!(seqs(&s.train).is_disjoint(&seqs(&s.test)));
        assert!(seqs(&s.train).is_disjoint(&seqs(&s.val)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), w.len());
    }

    #[test]
    fn csv_import() {
        let f = import_csv("1,2\n3,4\n\n5,6.5\n").unwrap();
        assert_eq!(f.d, 2);
        assert_eq!(f.sequences, vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.5]]);
        assert!(import_csv("1,2\n3\n").is_err());
        assert!(import_csv("").is_err());
        assert!(import_csv("1,x\n").is_err());
    }

    #[test]
    fn synthetic_identity_dynamics() {
        let cfg = SyntheticConfig {
            d: 4,
            num_sequences: 2,
            length: 6,
            thetas: Some(vec![0.0, 0.0]),
            sigma: 0.0,
            ..SyntheticConfig::default()
        };
        let f = generate_synthetic(&cfg).unwrap();
        for s in 0..2 {
            for t in 1..6 {
                assert_eq!(f.frame(s, t), f.frame(s, 0));
            }
        }
        assert!(generate_synthetic(&SyntheticConfig { d: 5, ..cfg.clone() }).is_err());
    }

    #[test]
    fn synthetic_rotation_preserves_norm() {
        let cfg = SyntheticConfig {
            sigma: 0.0,
            num_sequences: 3,
            ..SyntheticConfig::default()
        };
        let f = generate_synthetic(&cfg).unwrap();
        for s in 0..3 {
            let norm = |t: usize| f.frame(s, t).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let n0 = norm(0);
            for t in 0..cfg.length {
                assert!((norm(t) - n0).abs() < 1e-5, "{} vs {n0}", norm(t));
            }
        }
    }
}

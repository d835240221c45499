//! Dataset pipeline: grayscale image ingest, manifests, exhaustive labeling
//! of CTUs, canonical-orientation training samples and sharded storage.
//!
//! Samples are stored per (split, shape, qp) shard. Pixels, the winning
//! mode and the per-mode costs are all kept in canonical orientation
//! (width >= height); a tall block is transposed and its horizontal and
//! vertical modes swap accordingly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::{Plane, ProxyCodecConfig};
use crate::par::{map_indexed, Parallelism};
use crate::qtmt::{CuShape, PartitionConfig, SplitMode};
use crate::rdo::{exhaustive_partition, extract_labels, LabeledCu};
use crate::train::TrainSample;
use crate::{Error, Result};

const SHARD_MAGIC: &[u8; 8] = b"CUSHARD1";
const SHARD_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Image I/O

/// Writes a binary 8-bit PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, img: &Plane) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.w, img.h)?;
    f.write_all(img.as_slice())?;
    Ok(())
}

/// Reads a binary 8-bit PGM. Comments and arbitrary header whitespace are
/// accepted; only maxval 255 is.
pub fn read_pgm(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path)?;
    let err = |msg: &str| Error::format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2usize;
    let mut next_token = |bytes: &[u8]| -> Result<usize> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("expected a decimal header field"));
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format("bad header number"))
    };
    let w = next_token(&bytes).map_err(|_| err("bad width"))?;
    let h = next_token(&bytes).map_err(|_| err("bad height"))?;
    let maxval = next_token(&bytes).map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing header terminator"));
    }
    pos += 1;
    if bytes.len() - pos < w * h {
        return Err(err("pixel payload is truncated"));
    }
    Plane::from_vec(w, h, bytes[pos..pos + w * h].to_vec())
}

/// Reads one frame of a headerless planar luma file (one byte per pixel,
/// frames back to back).
pub fn read_raw_luma(path: &Path, w: usize, h: usize, frame: usize) -> Result<Plane> {
    let mut f = std::fs::File::open(path)?;
    let frame_bytes = (w * h) as u64;
    let len = f.metadata()?.len();
    let offset = frame as u64 * frame_bytes;
    if offset + frame_bytes > len {
        return Err(Error::format(format!(
            "{}: frame {frame} of {w}x{h} needs {} bytes, file has {len}",
            path.display(),
            offset + frame_bytes
        )));
    }
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; w * h];
    f.read_exact(&mut buf)?;
    Plane::from_vec(w, h, buf)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// One source image or raw luma sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub split: Split,
}

/// Parses `path width height frames split` lines. `#` starts a comment.
/// Relative paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "manifest line {}: expected 'path width height frames split', got {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| {
                Error::format(format!("manifest line {}: bad {what} {s:?}", lineno + 1))
            })
        };
        let path = PathBuf::from(fields[0]);
        let path = if path.is_absolute() { path } else { base_dir.join(path) };
        let entry = ManifestEntry {
            path,
            width: num(fields[1], "width")?,
            height: num(fields[2], "height")?,
            frames: num(fields[3], "frames")?,
            split: fields[4].parse()?,
        };
        if entry.frames == 0 {
            return Err(Error::format(format!(
                "manifest line {}: frame count must be positive",
                lineno + 1
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Loads one frame of a manifest entry. `.pgm` files carry their own
/// dimensions, which must agree with the manifest; anything else is read as
/// headerless planar luma.
pub fn load_frame(entry: &ManifestEntry, frame: usize) -> Result<Plane> {
    let is_pgm = entry
        .path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        if frame != 0 {
            return Err(Error::format(format!(
                "{}: PGM files hold a single frame",
                entry.path.display()
            )));
        }
        let img = read_pgm(&entry.path)?;
        if img.w != entry.width || img.h != entry.height {
            return Err(Error::format(format!(
                "{}: header says {}x{}, manifest says {}x{}",
                entry.path.display(),
                img.w,
                img.h,
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    } else {
        read_raw_luma(&entry.path, entry.width, entry.height, frame)
    }
}

/// Cuts an image into full CTUs, top-left aligned; partial right and bottom
/// edges are dropped. Tiles are returned row-major.
pub fn ctu_planes(img: &Plane, ctu_size: usize) -> Result<Vec<Plane>> {
    let cols = img.w / ctu_size;
    let rows = img.h / ctu_size;
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            out.push(img.tile(c * ctu_size, r * ctu_size, ctu_size)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Canonical samples

/// Where a sample came from: source index into the shard's source table,
/// linear CTU index within that source, and the block position inside the
/// CTU in the image's own orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOrigin {
    pub source: u32,
    pub ctu: u32,
    pub x: u16,
    pub y: u16,
    pub transposed: bool,
}

/// Turns one labeled block into a canonical-orientation sample. Transposing
/// the pixels swaps the horizontal and vertical split modes, for the label
/// and the cost table alike.
pub fn canonicalize_label(ctu: &Plane, lab: &LabeledCu, qp: u8) -> Result<(CuShape, TrainSample, bool)> {
    let (shape, transposed) = lab.cu.canonical_shape();
    let px = ctu.window(
        lab.cu.x as usize,
        lab.cu.y as usize,
        lab.cu.w as usize,
        lab.cu.h as usize,
    )?;
    let (pixels, mode, costs) = if transposed {
        let mut costs = [None; 6];
        for code in 0..6u8 {
            let m = SplitMode::from_code(code)?;
            costs[m.transpose().code() as usize] = lab.costs[code as usize];
        }
        (px.transpose(), lab.mode.transpose(), costs)
    } else {
        (px, lab.mode, lab.costs)
    };
    if costs[mode.code() as usize].is_none() {
        return Err(Error::format(format!(
            "label {mode:?} for {} has no recorded cost",
            lab.cu
        )));
    }
    Ok((
        shape,
        TrainSample {
            pixels,
            qp,
            mode,
            costs,
        },
        transposed,
    ))
}

// ---------------------------------------------------------------------------
// Shards

/// One stored group of samples: a single canonical shape at a single qp.
#[derive(Clone, Debug)]
pub struct Shard {
    pub shape: CuShape,
    pub qp: u8,
    pub sources: Vec<String>,
    pub samples: Vec<TrainSample>,
    pub origins: Vec<SampleOrigin>,
}

pub fn shard_filename(shape: CuShape, qp: u8) -> String {
    format!("shape_{}x{}_qp{}.bin", shape.w, shape.h, qp)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!("{}: truncated shard", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Shard {
    pub fn write(&self, path: &Path) -> Result<()> {
        assert_eq!(self.samples.len(), self.origins.len());
        let mut out = Vec::new();
        out.extend_from_slice(SHARD_MAGIC);
        put_u32(&mut out, SHARD_VERSION);
        put_u32(&mut out, self.shape.w);
        put_u32(&mut out, self.shape.h);
        put_u32(&mut out, u32::from(self.qp));
        put_u32(&mut out, self.sources.len() as u32);
        for s in &self.sources {
            put_u32(&mut out, s.len() as u32);
            out.extend_from_slice(s.as_bytes());
        }
        put_u32(&mut out, self.samples.len() as u32);
        for (sample, origin) in self.samples.iter().zip(&self.origins) {
            put_u32(&mut out, origin.source);
            put_u32(&mut out, origin.ctu);
            out.extend_from_slice(&origin.x.to_le_bytes());
            out.extend_from_slice(&origin.y.to_le_bytes());
            out.push(u8::from(origin.transposed));
            out.push(sample.mode.code());
            let mut mask = 0u8;
            for (code, c) in sample.costs.iter().enumerate() {
                if c.is_some() {
                    mask |= 1 << code;
                }
            }
            out.push(mask);
            for c in sample.costs.iter().flatten() {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(sample.pixels.as_slice());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Shard> {
        let bytes = std::fs::read(path)?;
        let what = path.display().to_string();
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            what: &what,
        };
        if r.take(8)? != SHARD_MAGIC {
            return Err(Error::format(format!("{what}: not a sample shard")));
        }
        if r.u32()? != SHARD_VERSION {
            return Err(Error::format(format!("{what}: unsupported shard version")));
        }
        let w = r.u32()?;
        let h = r.u32()?;
        if w < h || w == 0 {
            return Err(Error::format(format!("{what}: non-canonical shard shape {w}x{h}")));
        }
        let shape = CuShape::new(w, h);
        let qp = r.u32()?;
        if qp > 51 {
            return Err(Error::format(format!("{what}: qp {qp} out of range")));
        }
        let n_sources = r.u32()? as usize;
        let mut sources = Vec::with_capacity(n_sources);
        for _ in 0..n_sources {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(format!("{what}: source name is not UTF-8")))?;
            sources.push(s.to_string());
        }
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        for _ in 0..n {
            let source = r.u32()?;
            if source as usize >= sources.len() {
                return Err(Error::format(format!("{what}: source index out of range")));
            }
            let ctu = r.u32()?;
            let x = r.u16()?;
            let y = r.u16()?;
            let transposed = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::format(format!("{what}: bad orientation flag {v}"))),
            };
            let mode = SplitMode::from_code(r.u8()?)?;
            let mask = r.u8()?;
            if mask & !0x3f != 0 {
                return Err(Error::format(format!("{what}: bad cost mask {mask:#x}")));
            }
            let mut costs = [None; 6];
            for (code, c) in costs.iter_mut().enumerate() {
                if mask & (1 << code) != 0 {
                    *c = Some(r.f64()?);
                }
            }
            if costs[mode.code() as usize].is_none() {
                return Err(Error::format(format!("{what}: winning mode has no cost")));
            }
            let px = r.take(w as usize * h as usize)?;
            samples.push(TrainSample {
                pixels: Plane::from_vec(w as usize, h as usize, px.to_vec())?,
                qp: qp as u8,
                mode,
                costs,
            });
            origins.push(SampleOrigin {
                source,
                ctu,
                x,
                y,
                transposed,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{what}: trailing bytes after last sample")));
        }
        Ok(Shard {
            shape,
            qp: qp as u8,
            sources,
            samples,
            origins,
        })
    }
}

// ---------------------------------------------------------------------------
// Database build

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub qps: Vec<u8>,
    pub partition: PartitionConfig,
    pub codec: ProxyCodecConfig,
    pub parallelism: Parallelism,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            qps: vec![22, 27, 32, 37],
            partition: PartitionConfig::vvc_intra(),
            codec: ProxyCodecConfig::default(),
            parallelism: Parallelism::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRow {
    pub split: Split,
    pub shape: CuShape,
    pub qp: u8,
    pub count: u64,
    /// Label histogram indexed by canonical mode code.
    pub mode_counts: [u64; 6],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub rows: Vec<SummaryRow>,
}

impl DatasetSummary {
    pub fn total_samples(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "split,shape,qp,count,non_split,quad,hor_binary,ver_binary,hor_ternary,ver_ternary\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.split,
                r.shape,
                r.qp,
                r.count,
                r.mode_counts[0],
                r.mode_counts[1],
                r.mode_counts[2],
                r.mode_counts[3],
                r.mode_counts[4],
                r.mode_counts[5]
            ));
        }
        out
    }
}

#[derive(Default)]
struct ShardAcc {
    sources: Vec<String>,
    index: HashMap<String, u32>,
    samples: Vec<TrainSample>,
    origins: Vec<SampleOrigin>,
}

impl ShardAcc {
    fn source_id(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.sources.len() as u32;
        self.sources.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }
}

/// Labels every CTU of every manifest entry by exhaustive search and writes
/// the per-(split, shape, qp) shards under `out_dir/{train,val,test}/`.
pub fn build_database(
    entries: &[ManifestEntry],
    out_dir: &Path,
    cfg: &DatasetConfig,
) -> Result<DatasetSummary> {
    if entries.is_empty() {
        return Err(Error::config("manifest has no entries"));
    }
    if cfg.qps.is_empty() {
        return Err(Error::config("no qp values requested"));
    }
    for &qp in &cfg.qps {
        if qp > 51 {
            return Err(Error::config(format!("qp {qp} out of range")));
        }
    }
    let ctu_size = cfg.partition.ctu_size as usize;
    let mut accs: BTreeMap<(Split, CuShape, u8), ShardAcc> = BTreeMap::new();

    for entry in entries {
        for frame in 0..entry.frames {
            let img = load_frame(entry, frame)?;
            let source = if entry.frames > 1 {
                format!("{}#f{frame}", entry.path.display())
            } else {
                entry.path.display().to_string()
            };
            let tiles = ctu_planes(&img, ctu_size)?;
            if tiles.is_empty() {
                return Err(Error::format(format!(
                    "{source}: image {}x{} holds no complete {ctu_size}-pixel CTU",
                    img.w, img.h
                )));
            }
            let jobs: Vec<(usize, u8)> = (0..tiles.len())
                .flat_map(|i| cfg.qps.iter().map(move |&q| (i, q)))
                .collect();
            let labeled: Vec<Result<Vec<LabeledCu>>> =
                map_indexed(cfg.parallelism, &jobs, |_, &(i, qp)| {
                    let outcome = exhaustive_partition(&tiles[i], qp, &cfg.partition, &cfg.codec)?;
                    extract_labels(&outcome, &cfg.partition)
                });
            for (&(i, qp), labs) in jobs.iter().zip(labeled) {
                for lab in labs? {
                    let (shape, sample, transposed) = canonicalize_label(&tiles[i], &lab, qp)?;
                    let acc = accs.entry((entry.split, shape, qp)).or_default();
                    let source_id = acc.source_id(&source);
                    acc.origins.push(SampleOrigin {
                        source: source_id,
                        ctu: i as u32,
                        x: lab.cu.x as u16,
                        y: lab.cu.y as u16,
                        transposed,
                    });
                    acc.samples.push(sample);
                }
            }
        }
    }

    let mut summary = DatasetSummary::default();
    for ((split, shape, qp), acc) in accs {
        let dir = out_dir.join(split.as_str());
        std::fs::create_dir_all(&dir)?;
        let mut mode_counts = [0u64; 6];
        for s in &acc.samples {
            mode_counts[s.mode.code() as usize] += 1;
        }
        summary.rows.push(SummaryRow {
            split,
            shape,
            qp,
            count: acc.samples.len() as u64,
            mode_counts,
        });
        Shard {
            shape,
            qp,
            sources: acc.sources,
            samples: acc.samples,
            origins: acc.origins,
        }
        .write(&dir.join(shard_filename(shape, qp)))?;
    }
    Ok(summary)
}

fn split_shard_paths(db_dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let dir = db_dir.join(split.as_str());
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "bin").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("shape_"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads all shards of one split, merged per shape across qps, in sorted
/// shard-file order.
pub fn load_split(db_dir: &Path, split: Split) -> Result<BTreeMap<CuShape, Vec<TrainSample>>> {
    let mut out: BTreeMap<CuShape, Vec<TrainSample>> = BTreeMap::new();
    for path in split_shard_paths(db_dir, split)? {
        let shard = Shard::read(&path)?;
        out.entry(shard.shape).or_default().extend(shard.samples);
    }
    Ok(out)
}

/// Rebuilds the summary of an existing database directory from its shards.
pub fn scan_database(db_dir: &Path) -> Result<DatasetSummary> {
    let mut summary = DatasetSummary::default();
    for split in Split::ALL {
        for path in split_shard_paths(db_dir, split)? {
            let shard = Shard::read(&path)?;
            let mut mode_counts = [0u64; 6];
            for s in &shard.samples {
                mode_counts[s.mode.code() as usize] += 1;
            }
            summary.rows.push(SummaryRow {
                split,
                shape: shard.shape,
                qp: shard.qp,
                count: shard.samples.len() as u64,
                mode_counts,
            });
        }
    }
    summary.rows.sort_by_key(|r| (r.split, r.shape, r.qp));
    Ok(summary)
}

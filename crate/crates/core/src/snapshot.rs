//! Binary model snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NASSNAP\0"
//! version  u32
//! body_len u64
//! body     tag u8, mode u8, n u64, m u64, d u64, h u64, k_max u64,
//!          block_count u32, then per block:
//!          name_len u16, name, rows u64, cols u64, rows*cols f64
//! sha256   32 bytes over the body
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save/load/save is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BprMfModel;
use crate::error::{NasError, Result};
use crate::eval::Recommender;
use crate::model::{AttentionMode, LatentFactors, NasModel, NasParameters};
use crate::nn::Matrix;

const MAGIC: &[u8; 8] = b"NASSNAP\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Nas,
    NasStar,
    BprMf,
}

impl ModelTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelTag::Nas => "nas",
            ModelTag::NasStar => "nas_star",
            ModelTag::BprMf => "bpr_mf",
        }
    }

    fn code(&self) -> u8 {
        match self {
            ModelTag::Nas => 0,
            ModelTag::NasStar => 1,
            ModelTag::BprMf => 2,
        }
    }
}

impl std::str::FromStr for ModelTag {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nas" => Ok(ModelTag::Nas),
            "nas_star" => Ok(ModelTag::NasStar),
            "bpr_mf" => Ok(ModelTag::BprMf),
            other => Err(NasError::Config(format!(
                "unknown model `{other}` (expected nas, nas_star or bpr_mf)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSnapshot {
    Nas(NasModel),
    BprMf(BprMfModel),
}

impl From<NasModel> for ModelSnapshot {
    fn from(m: NasModel) -> Self {
        ModelSnapshot::Nas(m)
    }
}

impl From<BprMfModel> for ModelSnapshot {
    fn from(m: BprMfModel) -> Self {
        ModelSnapshot::BprMf(m)
    }
}

fn mode_code(mode: AttentionMode) -> u8 {
    match mode {
        AttentionMode::Softmax => 0,
        AttentionMode::Unit => 1,
        AttentionMode::Mean => 2,
    }
}

fn corrupt(msg: impl Into<String>) -> NasError {
    NasError::Snapshot(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn block(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(rows * cols, data.len());
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u64(rows as u64);
        self.u64(cols as u64);
        for v in data {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("snapshot truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflows usize"))
    }
    fn block(&mut self) -> Result<(String, usize, usize, Vec<f64>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt("block name is not UTF-8"))?
            .to_string();
        let rows = self.usize()?;
        let cols = self.usize()?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| corrupt("block too large"))?;
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| corrupt("block too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok((name, rows, cols, data))
    }
}

impl ModelSnapshot {
    pub fn tag(&self) -> ModelTag {
        match self {
            ModelSnapshot::Nas(m) if m.mode == AttentionMode::Softmax => ModelTag::Nas,
            ModelSnapshot::Nas(_) => ModelTag::NasStar,
            ModelSnapshot::BprMf(_) => ModelTag::BprMf,
        }
    }

    pub fn factors(&self) -> &LatentFactors {
        match self {
            ModelSnapshot::Nas(m) => &m.factors,
            ModelSnapshot::BprMf(m) => &m.factors,
        }
    }

    /// Names of the stored blocks, in file order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = vec!["users".to_string(), "items".to_string()];
        if let ModelSnapshot::Nas(m) = self {
            names.extend(m.params.blocks().into_iter().map(|(n, _)| n));
        }
        names
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let f = self.factors();
        let (mode, h, k_max) = match self {
            ModelSnapshot::Nas(m) => (mode_code(m.mode), m.h(), m.k_max),
            ModelSnapshot::BprMf(_) => (0, 0, 0),
        };
        let mut body = Writer(Vec::new());
        body.u8(self.tag().code());
        body.u8(mode);
        for v in [f.n_users(), f.n_items(), f.d(), h, k_max] {
            body.u64(v as u64);
        }
        let mut blocks: Vec<(String, usize, usize, &[f64])> = vec![
            ("users".into(), f.n_users(), f.d(), f.users.as_slice()),
            ("items".into(), f.n_items(), f.d(), f.items.as_slice()),
        ];
        if let ModelSnapshot::Nas(m) = self {
            let d = m.d();
            for (name, data) in m.params.blocks() {
                let cols = data.len() / d;
                blocks.push((name, d, cols, data));
            }
        }
        body.u32(blocks.len() as u32);
        for (name, rows, cols, data) in blocks {
            body.block(&name, rows, cols, data);
        }
        let body = body.0;
        let mut out = Writer(Vec::with_capacity(body.len() + 52));
        out.0.extend_from_slice(MAGIC);
        out.u32(VERSION);
        out.u64(body.len() as u64);
        out.0.extend_from_slice(&body);
        out.0.extend_from_slice(&Sha256::digest(&body));
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a model snapshot (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported snapshot version {version}")));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| corrupt("body too large"))?;
        let body = r.take(len)?;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after checksum"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch: snapshot is corrupt"));
        }
        Self::parse_body(body)
    }

    fn parse_body(body: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: body, pos: 0 };
        let tag = r.u8()?;
        let mode = r.u8()?;
        let n = r.usize()?;
        let m = r.usize()?;
        let d = r.usize()?;
        let h = r.usize()?;
        let k_max = r.usize()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            blocks.push(r.block()?);
        }
        let mut blocks = blocks.into_iter();
        let mut table = |name: &str, rows: usize| -> Result<Matrix> {
            let (got, br, bc, data) = blocks
                .next()
                .ok_or_else(|| corrupt(format!("missing block `{name}`")))?;
            if got != name || br != rows || bc != d {
                return Err(corrupt(format!(
                    "expected block `{name}` of {rows}x{d}, found `{got}` of {br}x{bc}"
                )));
            }
            Ok(Matrix::from_vec(rows, d, data))
        };
        let users = table("users", n)?;
        let items = table("items", m)?;
        let factors = LatentFactors::new(users, items);
        let snapshot = match tag {
            2 => ModelSnapshot::BprMf(BprMfModel { factors }),
            0 | 1 => {
                let mode = match (tag, mode) {
                    (0, 0) => AttentionMode::Softmax,
                    (1, 1) => AttentionMode::Unit,
                    (1, 2) => AttentionMode::Mean,
                    _ => return Err(corrupt(format!("bad attention mode {mode} for tag {tag}"))),
                };
                if d == 0 || h == 0 {
                    return Err(corrupt("network snapshot needs positive d and h"));
                }
                let mut params = NasParameters::zeros(d, h, mode == AttentionMode::Softmax);
                for (name, dst) in params.blocks_mut() {
                    let (got, br, bc, data) = blocks
                        .next()
                        .ok_or_else(|| corrupt(format!("missing block `{name}`")))?;
                    if got != name || br * bc != dst.len() {
                        return Err(corrupt(format!(
                            "expected block `{name}` with {} values, found `{got}` with {}",
                            dst.len(),
                            br * bc
                        )));
                    }
                    dst.copy_from_slice(&data);
                }
                ModelSnapshot::Nas(NasModel::new(factors, params, mode, k_max))
            }
            other => return Err(corrupt(format!("unknown model tag {other}"))),
        };
        if let Some((name, ..)) = blocks.next() {
            return Err(corrupt(format!("unexpected extra block `{name}`")));
        }
        Ok(snapshot)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| NasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| NasError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Recommender for ModelSnapshot {
    fn n_users(&self) -> usize {
        self.factors().n_users()
    }

    fn n_items(&self) -> usize {
        self.factors().n_items()
    }

    fn k_max(&self) -> usize {
        match self {
            ModelSnapshot::Nas(m) => m.k_max,
            ModelSnapshot::BprMf(m) => m.k_max(),
        }
    }

    fn score_all(&self, user: usize, friends: &[usize]) -> Vec<f64> {
        match self {
            ModelSnapshot::Nas(m) => m.score_all(user, friends),
            ModelSnapshot::BprMf(m) => m.score_all(user, friends),
        }
    }
}

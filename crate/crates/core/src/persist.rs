//! Single-file checkpoints with a fixed little-endian layout.
//!
//! ```text
//! magic      8 bytes   "VLPCKPT\0"
//! version    u32
//! seed       u64
//! step       u64
//! config     u64 length, then that many bytes of JSON
//! tensors    u64 count, then per tensor in name order:
//!              u64 name length, UTF-8 name, u64 rank, rank × u64 extents, numel × f64
//! gates      u8 presence flag; if 1:
//!              f64 stretch_lo, f64 stretch_hi, f64 threshold, u64 group count, then per group:
//!              u8 encoder, u64 layer, u8 kind, u64 params per unit, u64 units, units × f64 logits
//! controls   u8 presence flag; if 1:
//!              f64 ascent rate, u64 controller count, then per controller:
//!              u64 scope length, scope × u8 encoder, f64 lam1, f64 lam2, f64 target, u8 active
//! checksum   32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Encoders are numbered vision 0, text 1, fusion 2; unit kinds head 0, cross_head 1,
//! ffn_neuron 2. Every integer is unsigned 64-bit unless noted.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use numcore::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Result, VlpError};
use crate::l0prune::{Constraints, Controller, GateSet, LagrangianState, UnitGroup};
use crate::trimodel::{param_specs, Encoder, UnitKind, VlmConfig, VlmModel};

pub const MAGIC: [u8; 8] = *b"VLPCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to resume or inspect a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: VlmModel,
    pub gates: Option<GateSet>,
    pub constraints: Option<Constraints>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: VlmModel, seed: u64, step: u64) -> Self {
        Self {
            model,
            gates: None,
            constraints: None,
            seed,
            step,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
}

fn encoder_code(e: Encoder) -> u8 {
    e.index() as u8
}

fn kind_code(k: UnitKind) -> u8 {
    UnitKind::ALL
        .iter()
        .position(|&x| x == k)
        .expect("known kind") as u8
}

/// Canonical byte encoding of a checkpoint, checksum included.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(ckpt.seed);
    w.u64(ckpt.step);
    w.bytes(&serde_json::to_vec(&ckpt.model.config).expect("config serializes"));
    w.len(ckpt.model.params.len());
    for (name, t) in &ckpt.model.params {
        w.bytes(name.as_bytes());
        w.len(t.rank());
        for &d in t.shape() {
            w.len(d);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    match &ckpt.gates {
        None => w.u8(0),
        Some(gs) => {
            w.u8(1);
            w.f64(gs.stretch_lo);
            w.f64(gs.stretch_hi);
            w.f64(gs.threshold);
            w.len(gs.groups.len());
            for grp in &gs.groups {
                w.u8(encoder_code(grp.encoder));
                w.len(grp.layer);
                w.u8(kind_code(grp.kind));
                w.len(grp.params_per_unit);
                w.len(grp.logits.len());
                for &v in &grp.logits {
                    w.f64(v);
                }
            }
        }
    }
    match &ckpt.constraints {
        None => w.u8(0),
        Some(c) => {
            w.u8(1);
            w.f64(c.ascent_rate);
            w.len(c.controllers.len());
            for ctl in &c.controllers {
                w.len(ctl.scope.len());
                for &e in &ctl.scope {
                    w.u8(encoder_code(e));
                }
                w.f64(ctl.state.lam1);
                w.f64(ctl.state.lam2);
                w.f64(ctl.state.target);
                w.u8(ctl.active as u8);
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn malformed(&self, detail: impl Into<String>) -> VlpError {
        VlpError::Malformed {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(self.malformed(format!("record runs past end at offset {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A length or count; bounded by the remaining bytes so corrupt values cannot over-allocate.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if v.saturating_mul(unit.max(1) as u64) > remaining {
            return Err(self.malformed(format!("count {v} exceeds remaining {remaining} bytes")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn encoder(&mut self) -> Result<Encoder> {
        let c = self.u8()?;
        Encoder::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| self.malformed(format!("unknown encoder code {c}")))
    }

    fn kind(&mut self) -> Result<UnitKind> {
        let c = self.u8()?;
        UnitKind::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| self.malformed(format!("unknown unit kind code {c}")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(self.malformed(format!("bad flag byte {other}"))),
        }
    }
}

/// Parses and validates checkpoint bytes. `path` only labels errors.
pub fn decode(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let pb = || path.to_path_buf();
    if buf.len() >= MAGIC.len() && buf[..MAGIC.len()] != MAGIC {
        return Err(VlpError::BadMagic { path: pb() });
    }
    let header = MAGIC.len() + 4;
    if buf.len() < header + DIGEST_LEN {
        return Err(VlpError::Checksum { path: pb() });
    }
    let found = u32::from_le_bytes(buf[MAGIC.len()..header].try_into().expect("4 bytes"));
    if found != VERSION {
        return Err(VlpError::Version {
            path: pb(),
            found,
            expected: VERSION,
        });
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(VlpError::Checksum { path: pb() });
    }

    let mut r = Reader {
        buf: body,
        pos: header,
        path,
    };
    let seed = r.u64()?;
    let step = r.u64()?;
    let config: VlmConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| r.malformed(format!("config: {e}")))?;
    config.validate()?;
    let expected: BTreeMap<String, Vec<usize>> = param_specs(&config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();

    let count = r.len(1)?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| r.malformed("tensor name is not UTF-8"))?;
        let rank = r.len(8)?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let Some(want) = expected.get(&name) else {
            return Err(r.malformed(format!("tensor {name} is not part of the embedded config")));
        };
        if &shape != want {
            return Err(VlpError::CheckpointShape {
                path: pb(),
                name,
                found: shape,
                expected: want.clone(),
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| r.malformed("tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if let Some(missing) = expected.keys().find(|k| !params.contains_key(*k)) {
        return Err(r.malformed(format!("tensor {missing} missing")));
    }
    let model = VlmModel::from_parts(config, params)?;

    let gates = if r.flag()? {
        let stretch_lo = r.f64()?;
        let stretch_hi = r.f64()?;
        let threshold = r.f64()?;
        let n = r.len(1)?;
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            let encoder = r.encoder()?;
            let layer = r.u64()? as usize;
            let kind = r.kind()?;
            let params_per_unit = r.u64()? as usize;
            let units = r.len(8)?;
            let logits = (0..units).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            groups.push(UnitGroup {
                encoder,
                layer,
                kind,
                params_per_unit,
                logits,
            });
        }
        let gs = GateSet {
            stretch_lo,
            stretch_hi,
            threshold,
            groups,
        };
        gs.validate()?;
        gs.check_bound(&model)?;
        Some(gs)
    } else {
        None
    };

    let constraints = if r.flag()? {
        let ascent_rate = r.f64()?;
        let n = r.len(1)?;
        let mut controllers = Vec::with_capacity(n);
        for _ in 0..n {
            let k = r.len(1)?;
            let scope = (0..k).map(|_| r.encoder()).collect::<Result<Vec<_>>>()?;
            let lam1 = r.f64()?;
            let lam2 = r.f64()?;
            let target = r.f64()?;
            let active = r.flag()?;
            controllers.push(Controller {
                scope,
                state: LagrangianState { lam1, lam2, target },
                active,
            });
        }
        Some(Constraints {
            controllers,
            ascent_rate,
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(r.malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        gates,
        constraints,
        seed,
        step,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VlpError + '_ {
    move |source| VlpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `ckpt` to `path` through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let mut tmp_name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(&buf, path)
}

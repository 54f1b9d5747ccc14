//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDVM" u32:version u32:count
//! count x { u16:name_len name u8:dtype(0=f32) u8:rank rank x u32:dim f32 payload }
//! sections: [u8; 4]:tag u32:len payload
//!   META  key=value lines (model config, epoch); required
//!   ADAM  u64:t, then m and v for every parameter as f32
//!   RNGS  [u8; 32]:seed u64:stream u128:word_pos of the shuffle stream
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::AdamState;

pub const MAGIC: &[u8; 4] = b"FDVM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Saved position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub adam: Option<AdamState>,
    pub rng: Option<RngState>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.weights.named_params();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }

        let cfg = self.config();
        let meta = format!(
            "channels={}\nblocks_per_path={}\nssm_state_dim={}\nssm_fixed_hw={}\nablation={}\nepoch={}\n",
            cfg.channels, cfg.blocks_per_path, cfg.ssm_state_dim, cfg.ssm_fixed_hw, cfg.ablation, self.epoch
        );
        put_section(&mut out, b"META", meta.as_bytes());

        if let Some(adam) = &self.adam {
            let mut p = adam.t.to_le_bytes().to_vec();
            for t in adam.m.iter().chain(&adam.v) {
                put_f32s(&mut p, t.data());
            }
            put_section(&mut out, b"ADAM", &p);
        }
        if let Some(r) = &self.rng {
            let mut p = r.seed.to_vec();
            p.extend_from_slice(&r.stream.to_le_bytes());
            p.extend_from_slice(&r.word_pos.to_le_bytes());
            put_section(&mut out, b"RNGS", &p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, detail: "bad magic (not an FDVM checkpoint)".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32("parameter count")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.err(at, "parameter name is not UTF-8"))?
                .to_string();
            let dtype_at = r.pos;
            if r.u8("dtype")? != DTYPE_F32 {
                return Err(r.err(dtype_at, format!("unsupported dtype for `{name}`")));
            }
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let data = r.f32s(numel, "payload")?;
            table.push((name, at, Tensor::new(dims, data)?));
        }

        let mut meta = None;
        let mut adam_raw = None;
        let mut rng = None;
        while r.pos < bytes.len() {
            let at = r.pos;
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
            let len = r.u32("section length")? as usize;
            let body_at = r.pos;
            let body = r.take(len, "section body")?;
            match &tag {
                b"META" => meta = Some((body_at, body)),
                b"ADAM" => adam_raw = Some((body_at, body)),
                b"RNGS" => {
                    if len != 56 {
                        return Err(r.err(body_at, format!("RNGS section has {len} bytes, expected 56")));
                    }
                    rng = Some(RngState {
                        seed: body[..32].try_into().unwrap(),
                        stream: u64::from_le_bytes(body[32..40].try_into().unwrap()),
                        word_pos: u128::from_le_bytes(body[40..56].try_into().unwrap()),
                    });
                }
                _ => return Err(r.err(at, format!("unknown section `{}`", String::from_utf8_lossy(&tag)))),
            }
        }

        let (meta_at, meta) = meta.ok_or_else(|| r.err(r.pos, "missing META section"))?;
        let (config, epoch) = parse_meta(meta).map_err(|d| r.err(meta_at, d))?;
        let mut weights = crate::model::build_model(&config, 0).map_err(|e| r.err(meta_at, e.to_string()))?;
        fill_weights(&mut weights, table).map_err(|(at, d)| r.err(at, d))?;

        let adam = match adam_raw {
            None => None,
            Some((at, body)) => {
                let mut ar = Reader { bytes: body, pos: 0 };
                let shift = |e: Error| match e {
                    Error::Format { offset, detail } => Error::Format { offset: offset + at as u64, detail },
                    e => e,
                };
                let t = ar.u64("adam step").map_err(shift)?;
                let shapes: Vec<Vec<usize>> = weights.named_params().iter().map(|(_, p)| p.dims().to_vec()).collect();
                let mut moments = Vec::with_capacity(2 * shapes.len());
                for dims in shapes.iter().chain(&shapes) {
                    let data = ar.f32s(dims.iter().product(), "adam moment").map_err(shift)?;
                    moments.push(Tensor::new(dims.clone(), data)?);
                }
                if ar.pos != body.len() {
                    return Err(r.err(at + ar.pos, "trailing bytes in ADAM section"));
                }
                let v = moments.split_off(shapes.len());
                Some(AdamState { m: moments, v, t })
            }
        };
        Ok(Checkpoint { weights, adam, rng, epoch })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(4 * data.len());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
}

fn parse_meta(body: &[u8]) -> std::result::Result<(ModelConfig, usize), String> {
    let text = std::str::from_utf8(body).map_err(|_| "META is not UTF-8".to_string())?;
    let mut cfg = ModelConfig::default();
    let mut epoch = None;
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("META line `{line}` is not key=value"))?;
        let num = || v.parse::<usize>().map_err(|_| format!("META `{k}` is not an integer: `{v}`"));
        match k {
            "channels" => cfg.channels = num()?,
            "blocks_per_path" => cfg.blocks_per_path = num()?,
            "ssm_state_dim" => cfg.ssm_state_dim = num()?,
            "ssm_fixed_hw" => cfg.ssm_fixed_hw = num()?,
            "ablation" => cfg.ablation = v.parse().map_err(|e: Error| e.to_string())?,
            "epoch" => epoch = Some(num()?),
            _ => return Err(format!("unknown META key `{k}`")),
        }
        seen.push(k.to_string());
    }
    for key in ["channels", "blocks_per_path", "ssm_state_dim", "ssm_fixed_hw", "ablation"] {
        if !seen.iter().any(|s| s == key) {
            return Err(format!("META is missing `{key}`"));
        }
    }
    Ok((cfg, epoch.unwrap_or(0)))
}

/// Copies the parameter table into `weights`, requiring every parameter to
/// appear exactly once with matching dims.
fn fill_weights(weights: &mut ModelWeights, table: Vec<(String, usize, Tensor)>) -> std::result::Result<(), (usize, String)> {
    let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
    let mut slots: Vec<Option<Tensor>> = vec![None; names.len()];
    for (name, at, t) in table {
        let i = names.iter().position(|n| *n == name).ok_or((at, format!("unexpected parameter `{name}`")))?;
        if slots[i].is_some() {
            return Err((at, format!("parameter `{name}` appears twice")));
        }
        slots[i] = Some(t);
    }
    for ((slot, dst), name) in slots.into_iter().zip(weights.params_mut()).zip(&names) {
        let t = slot.ok_or((0, format!("parameter `{name}` is missing")))?;
        if t.dims() != dst.dims() {
            return Err((0, format!("parameter `{name}` has dims {:?}, expected {:?}", t.dims(), dst.dims())));
        }
        *dst = t;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format { offset: at as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| self.err(self.pos, format!("{what} too large")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

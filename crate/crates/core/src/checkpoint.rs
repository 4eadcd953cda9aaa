//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MVAR"  u32 version
//! u64 header length, header bytes (UTF-8 `key = value` lines)
//! u64 tensor count
//! per tensor: u32 name length, name, u32 rank, rank x u64 dims, f64 data
//! ```
//!
//! The header holds the model shape, the training config, step counters,
//! the RNG stream positions and the data cursor. Parameter tensors use the
//! store names (`shared.tok_emb`, `encoder.*`, `mapnet.*`); the shared table
//! is written once and named by the `shared` header key. Optimizer moments
//! follow as `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TRAIN_KEYS};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, SHARED_EMBEDDING};
use crate::tensor::Tensor;
use crate::trainer::{Adam, DataCursor, RngStreams, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MVAR";
pub const VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format(format!("odd-length hex `{s}`")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Format(format!("bad hex `{s}`"))))
        .collect()
}

fn rng_to_text(rng: &ChaCha8Rng) -> String {
    format!("{}:{}:{}", hex(&rng.get_seed()), rng.get_stream(), rng.get_word_pos())
}

fn rng_from_text(s: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::Format(format!("bad rng state `{s}`"));
    let mut it = s.split(':');
    let (Some(seed), Some(stream), Some(pos), None) = (it.next(), it.next(), it.next(), it.next()) else {
        return Err(bad());
    };
    let seed: [u8; 32] = unhex(seed)?.try_into().map_err(|_| bad())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

fn header(state: &TrainState, config: &TrainConfig) -> String {
    let enc = state.model.config();
    let mut lines = vec![
        format!("shared = {SHARED_EMBEDDING}"),
        format!("encoder.vocab_size = {}", enc.vocab_size),
        format!("encoder.max_seq_len = {}", enc.max_seq_len),
        format!("encoder.num_layers = {}", enc.num_layers),
        format!("encoder.hidden_size = {}", enc.hidden_size),
        format!("encoder.num_heads = {}", enc.num_heads),
        format!("encoder.ffn_multiplier = {}", enc.ffn_multiplier),
    ];
    for (k, v) in RunConfig::from_train(config).entries() {
        if TRAIN_KEYS.contains(&k) {
            lines.push(format!("train.{k} = {v}"));
        }
    }
    lines.push(format!("state.step = {}", state.step));
    lines.push(format!("state.encoder_updates = {}", state.encoder_updates));
    lines.push(format!("state.mapnet_updates = {}", state.mapnet_updates));
    for (name, rng) in state.rngs.named() {
        lines.push(format!("rng.{name} = {}", rng_to_text(rng)));
    }
    lines.push(format!("data.next = {}", state.cursor.next));
    let order: Vec<String> = state.cursor.order.iter().map(|i| i.to_string()).collect();
    lines.push(format!("data.order = {}", order.join(",")));
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

/// Serialises a training state and its config.
pub fn to_bytes(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let h = header(state, config);
    out.extend((h.len() as u64).to_le_bytes());
    out.extend(h.as_bytes());
    let store = &state.model.store;
    out.extend((3 * store.len() as u64).to_le_bytes());
    for id in store.ids() {
        write_tensor(&mut out, store.name(id), store.get(id));
    }
    for id in store.ids() {
        write_tensor(&mut out, &format!("adam.m/{}", store.name(id)), &state.adam.m[id.index()]);
    }
    for id in store.ids() {
        write_tensor(&mut out, &format!("adam.v/{}", store.name(id)), &state.adam.v[id.index()]);
    }
    out
}

pub fn save(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = to_bytes(state, config);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

fn get<'h>(h: &'h BTreeMap<String, String>, key: &str) -> Result<&'h str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("header lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = get(h, key)?;
    v.parse().map_err(|_| Error::Format(format!("bad value `{v}` for `{key}`")))
}

/// Inverse of [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = r.len()?;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut h = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
            .ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
        h.insert(k.to_string(), v.to_string());
    }
    if get(&h, "shared")? != SHARED_EMBEDDING {
        return Err(Error::Format("unexpected shared tensor name".into()));
    }
    let enc = EncoderConfig {
        vocab_size: parse(&h, "encoder.vocab_size")?,
        max_seq_len: parse(&h, "encoder.max_seq_len")?,
        num_layers: parse(&h, "encoder.num_layers")?,
        hidden_size: parse(&h, "encoder.hidden_size")?,
        num_heads: parse(&h, "encoder.num_heads")?,
        ffn_multiplier: parse(&h, "encoder.ffn_multiplier")?,
    };
    let mut rc = RunConfig::default();
    for k in TRAIN_KEYS {
        rc.set(k, get(&h, &format!("train.{k}"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let config = rc.train_config();

    // weights are overwritten below; the seed only fixes the shapes
    let mut model = Model::new(enc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut adam = Adam::new(&model.store);
    let count = r.len()?;
    let mut seen = vec![[false; 3]; model.store.len()];
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data)?;
        let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m/") {
            (1, p)
        } else if let Some(p) = name.strip_prefix("adam.v/") {
            (2, p)
        } else {
            (0, name.as_str())
        };
        let id = model
            .store
            .find(pname)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
        let expected = model.store.get(id).shape().to_vec();
        if t.shape() != expected.as_slice() {
            return Err(Error::Format(format!("`{name}` has shape {:?}, expected {expected:?}", t.shape())));
        }
        match slot {
            0 => model.store.set(id, t)?,
            1 => adam.m[id.index()] = t,
            _ => adam.v[id.index()] = t,
        }
        seen[id.index()][slot] = true;
    }
    if r.at != buf.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    if let Some(i) = seen.iter().position(|s| s.contains(&false)) {
        return Err(Error::Format(format!(
            "missing tensors for `{}`",
            model.store.name(crate::params::ParamId(i))
        )));
    }

    let mut rngs = RngStreams::new(0);
    for (name, rng) in rngs.named_mut() {
        *rng = rng_from_text(get(&h, &format!("rng.{name}"))?)?;
    }
    let order_text = get(&h, "data.order")?;
    let order = if order_text.is_empty() {
        Vec::new()
    } else {
        order_text
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad data order entry `{s}`"))))
            .collect::<Result<Vec<usize>>>()?
    };
    let state = TrainState {
        model,
        adam,
        step: parse(&h, "state.step")?,
        encoder_updates: parse(&h, "state.encoder_updates")?,
        mapnet_updates: parse(&h, "state.mapnet_updates")?,
        rngs,
        cursor: DataCursor {
            order,
            next: parse(&h, "data.next")?,
        },
    };
    Ok((state, config))
}

pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

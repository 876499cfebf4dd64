use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::state::{Normalizer, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNND";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bits(x: u64) -> f64 {
    f64::from_bits(x)
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (_, p) in state.params.iter() {
        out.push((format!("param/{}", p.name), p.value.clone()));
    }
    for (prefix, list) in [
        ("adam_m", &state.adam_m),
        ("adam_v", &state.adam_v),
        ("ema", &state.ema),
    ] {
        for ((_, p), t) in state.params.iter().zip(list.iter()) {
            out.push((format!("{prefix}/{}", p.name), t.clone()));
        }
    }
    out.push(("state/step".into(), Tensor::vector(vec![bits(state.step)])));
    let seed = state.rng.get_seed();
    let mut rng = Vec::with_capacity(7);
    for chunk in seed.chunks_exact(8) {
        rng.push(bits(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))));
    }
    rng.push(bits(state.rng.get_stream()));
    let pos = state.rng.get_word_pos();
    rng.push(bits(pos as u64));
    rng.push(bits((pos >> 64) as u64));
    out.push(("state/rng".into(), Tensor::vector(rng)));
    if let Some(a) = &state.atomref {
        out.push(("state/atomref".into(), Tensor::vector(a.clone())));
    }
    let n = &state.normalizer;
    out.push(("state/graph_mean".into(), Tensor::vector(n.graph_mean.clone())));
    out.push(("state/graph_std".into(), Tensor::vector(n.graph_std.clone())));
    out.push(("state/target_std".into(), Tensor::vector(n.target_std.clone())));
    out.push(("state/node_scale".into(), Tensor::vector(vec![n.node_scale])));
    out
}

pub(crate) fn encode(state: &TrainState) -> Vec<u8> {
    let tensors = named_tensors(state);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
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
            .ok_or_else(|| Error::Checkpoint(format!("corrupt checkpoint: truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Checkpoint("corrupt checkpoint: missing header".into()))?
        != CHECKPOINT_MAGIC
    {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("corrupt checkpoint: tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("corrupt checkpoint: {name} has {ndim} dims")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= buf.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("corrupt checkpoint: {name} shape {shape:?} too large")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("corrupt checkpoint: trailing bytes".into()));
    }
    Ok(out)
}

pub(crate) fn decode(buf: &[u8], template: &TrainState) -> Result<TrainState> {
    let tensors = decode_tensors(buf)?;
    let has_atomref = tensors.iter().any(|(n, _)| n == "state/atomref");
    let mut lookup: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut get = |name: &str, shape: Option<&[usize]>| -> Result<Tensor> {
        let t = lookup
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
        if let Some(s) = shape {
            if t.shape() != s {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(t)
    };
    let mut state = template.clone();
    let ids: Vec<_> = state.params.ids().collect();
    for id in &ids {
        let name = state.params.entry(*id).name.clone();
        let shape = state.params.get(*id).shape().to_vec();
        *state.params.get_mut(*id) = get(&format!("param/{name}"), Some(&shape))?;
        state.adam_m[id.index()] = get(&format!("adam_m/{name}"), Some(&shape))?;
        state.adam_v[id.index()] = get(&format!("adam_v/{name}"), Some(&shape))?;
        state.ema[id.index()] = get(&format!("ema/{name}"), Some(&shape))?;
    }
    state.step = get("state/step", Some(&[1]))?.data()[0].to_bits();
    let rng = get("state/rng", Some(&[7]))?;
    let words: Vec<u64> = rng.data().iter().map(|x| x.to_bits()).collect();
    let mut seed = [0u8; 32];
    for (k, w) in words[..4].iter().enumerate() {
        seed[8 * k..8 * k + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(words[4]);
    r.set_word_pos(words[5] as u128 | ((words[6] as u128) << 64));
    state.rng = r;
    state.atomref = if has_atomref {
        Some(get("state/atomref", None)?.into_data())
    } else {
        None
    };
    let width = template.normalizer.graph_mean.len();
    state.normalizer = Normalizer {
        graph_mean: get("state/graph_mean", Some(&[width]))?.into_data(),
        graph_std: get("state/graph_std", Some(&[width]))?.into_data(),
        target_std: get("state/target_std", Some(&[width]))?.into_data(),
        node_scale: get("state/node_scale", Some(&[1]))?.data()[0],
    };
    if let Some(extra) = lookup.keys().next() {
        return Err(Error::Checkpoint(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(state)
}

/// Writes the state atomically: a temporary sibling file is renamed over `path`.
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint into a state shaped like `template` (same model).
pub fn checkpoint_load(path: &Path, template: &TrainState) -> Result<TrainState> {
    decode(&fs::read(path)?, template)
}

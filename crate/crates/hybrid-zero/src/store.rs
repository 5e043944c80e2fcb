//! On-disk artifacts: checkpoints, per-epoch episode files and the resume
//! state. Every file starts with a magic tag, a format version, the training
//! hash and the seed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use hybrid_zero_core::experience::{decode_episodes, decode_window, encode_episodes, encode_window, Episode, ReplayWindow};
use hybrid_zero_core::model::{AdamState, ModelParameters, Network, NetworkConfig};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"HZCK";
const EPISODES_MAGIC: &[u8; 4] = b"HZES";
const STATE_MAGIC: &[u8; 4] = b"HZST";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: written by configuration {found}, expected {expected}")]
    HashMismatch { path: PathBuf, expected: String, found: String },
}

/// Identity stamped on every artifact of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub training_hash: String,
    pub seed: u64,
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch-{epoch:05}.ckpt")
}

pub fn episodes_name(epoch: u32) -> String {
    format!("epoch-{epoch:05}.hzep")
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn read(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4], stamp: &Stamp) -> Writer {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w.str(&stamp.training_hash);
        w.u64(stamp.seed);
        w
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, data: &[f32]) {
        self.str(name);
        self.u64(data.len() as u64);
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], path: &'a Path, magic: &[u8; 4], expect: Option<&Stamp>) -> Result<(Reader<'a>, Stamp), StoreError> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != magic {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(&format!("unsupported format version {version}")));
        }
        let stamp = Stamp { training_hash: r.str()?, seed: r.u64()? };
        if let Some(e) = expect {
            if e.training_hash != stamp.training_hash || e.seed != stamp.seed {
                return Err(StoreError::HashMismatch {
                    path: path.to_path_buf(),
                    expected: format!("{}/{}", e.training_hash, e.seed),
                    found: format!("{}/{}", stamp.training_hash, stamp.seed),
                });
            }
        }
        Ok((r, stamp))
    }
    fn err(&self, msg: &str) -> StoreError {
        StoreError::Format { path: self.path.to_path_buf(), msg: format!("{msg} at byte {}", self.pos) }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, StoreError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
    fn bytes(&mut self) -> Result<&'a [u8], StoreError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn tensor(&mut self, name: &str) -> Result<Vec<f32>, StoreError> {
        let found = self.str()?;
        if found != name {
            return Err(self.err(&format!("expected tensor `{name}`, found `{found}`")));
        }
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn finish(&self) -> Result<(), StoreError> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

/// Network weights after `epoch`, one named tensor per parameter entry.
pub fn encode_checkpoint(stamp: &Stamp, epoch: u32, net: &Network<f32>) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, stamp);
    w.u32(epoch);
    w.str(&toml::to_string(net.config()).expect("network config serializes"));
    let entries = net.entries();
    w.u32(entries.len() as u32);
    let params = net.params();
    for (i, e) in entries.iter().enumerate() {
        let end = entries.get(i + 1).map_or(params.len(), |n| n.offset);
        w.tensor(&e.name, &params[e.offset..end]);
    }
    w.0
}

pub fn decode_checkpoint(buf: &[u8], path: &Path, expect: Option<&Stamp>) -> Result<(Stamp, u32, Network<f32>), StoreError> {
    let (mut r, stamp) = Reader::open(buf, path, CHECKPOINT_MAGIC, expect)?;
    let epoch = r.u32()?;
    let cfg: NetworkConfig = toml::from_str(&r.str()?).map_err(|e| r.err(&format!("network config: {e}")))?;
    let template = Network::<f32>::from_params(cfg.clone(), vec![0.0; Network::<f32>::parameter_count(&cfg)])
        .map_err(|e| r.err(&e.to_string()))?;
    let count = r.u32()? as usize;
    if count != template.entries().len() {
        return Err(r.err(&format!("expected {} tensors, found {count}", template.entries().len())));
    }
    let mut params = Vec::with_capacity(template.params().len());
    for e in template.entries() {
        params.extend(r.tensor(&e.name)?);
    }
    r.finish()?;
    let net = Network::from_params(cfg, params).map_err(|e| r.err(&e.to_string()))?;
    Ok((stamp, epoch, net))
}

pub fn save_checkpoint(path: &Path, stamp: &Stamp, epoch: u32, net: &Network<f32>) -> Result<(), StoreError> {
    write_atomic(path, &encode_checkpoint(stamp, epoch, net))
}

pub fn load_checkpoint(path: &Path, expect: Option<&Stamp>) -> Result<(Stamp, u32, Network<f32>), StoreError> {
    decode_checkpoint(&read(path)?, path, expect)
}

pub fn encode_episode_file(stamp: &Stamp, epoch: u32, episodes: &[Episode]) -> Vec<u8> {
    let mut w = Writer::new(EPISODES_MAGIC, stamp);
    w.u32(epoch);
    w.bytes(&encode_episodes(episodes));
    w.0
}

pub fn load_episode_file(path: &Path, expect: Option<&Stamp>) -> Result<(u32, Vec<Episode>), StoreError> {
    let buf = read(path)?;
    let (mut r, _) = Reader::open(&buf, path, EPISODES_MAGIC, expect)?;
    let epoch = r.u32()?;
    let payload = r.bytes()?;
    r.finish()?;
    let eps = decode_episodes(payload).map_err(|e| r.err(&e.to_string()))?;
    Ok((epoch, eps))
}

/// What a resumed run needs beyond the last checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub epoch: u32,
    pub optimizer: AdamState,
    pub window: ReplayWindow,
}

pub fn encode_state(stamp: &Stamp, st: &ResumeState) -> Vec<u8> {
    let mut w = Writer::new(STATE_MAGIC, stamp);
    w.u32(st.epoch);
    w.u64(st.optimizer.step);
    w.tensor("adam.m", &st.optimizer.m);
    w.tensor("adam.v", &st.optimizer.v);
    w.u64(st.window.capacity() as u64);
    w.bytes(&encode_window(&st.window));
    w.0
}

pub fn load_state(path: &Path, expect: &Stamp) -> Result<ResumeState, StoreError> {
    let buf = read(path)?;
    let (mut r, _) = Reader::open(&buf, path, STATE_MAGIC, Some(expect))?;
    let epoch = r.u32()?;
    let step = r.u64()?;
    let m = r.tensor("adam.m")?;
    let v = r.tensor("adam.v")?;
    let capacity = r.u64()? as usize;
    let window = decode_window(r.bytes()?, capacity).map_err(|e| r.err(&e.to_string()))?;
    r.finish()?;
    Ok(ResumeState { epoch, optimizer: AdamState { m, v, step }, window })
}

pub fn restore_parameters(net: Network<f32>, st: &ResumeState) -> Result<ModelParameters, String> {
    if st.optimizer.m.len() != net.params().len() || st.optimizer.v.len() != net.params().len() {
        return Err("optimizer state does not match the network".into());
    }
    Ok(ModelParameters { network: net, optimizer: st.optimizer.clone(), epoch: st.epoch })
}

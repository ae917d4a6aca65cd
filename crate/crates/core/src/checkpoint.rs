//! Binary checkpoints: magic `HACA` + version byte, then length-prefixed
//! named sections (config text, parameter tensors, optimizer accumulators,
//! trainer progress, rng position). All integers and floats are
//! little-endian; parameters round-trip bitwise. Writes go to a temp file
//! renamed into place so a crash never leaves a partial checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{AdadeltaState, Trainer};

const MAGIC: &[u8; 4] = b"HACA";
const VERSION: u8 = 1;

/// Deserialized checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: AdadeltaState,
    /// Completed epochs.
    pub epoch: usize,
    pub val_history: Vec<f64>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Rebuilds a trainer that continues exactly where the saved one
    /// stopped: same parameters, accumulators, epoch counter, plateau
    /// history, and rng stream position.
    pub fn into_trainer(self) -> Result<(Trainer, RunConfig)> {
        let model_cfg = self.config.model.clone();
        let mut model = Model::build(model_cfg)?;
        model.set_param_map(&self.params)?;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        let mut trainer = Trainer::new(model, self.config.train.clone())?;
        trainer.optimizer = self.optimizer;
        trainer.rng = rng;
        trainer.epoch = self.epoch;
        trainer.val_history = self.val_history;
        Ok((trainer, self.config))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn floats(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    fn section(&mut self, name: &str, payload: Vec<u8>) {
        self.str(name);
        self.u64(payload.len() as u64);
        self.bytes(&payload);
    }
}

/// Saves the trainer and its effective run configuration.
pub fn save_checkpoint(path: &Path, trainer: &Trainer, config: &RunConfig) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.buf.push(VERSION);

    w.section("config", config.to_text().into_bytes());

    let mut params = Writer::new();
    let named = trainer.model.named_params();
    params.u32(named.len() as u32);
    for (name, tensor) in named {
        params.str(&name);
        params.buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            params.u64(d as u64);
        }
        for &v in tensor.values() {
            params.f64(v);
        }
    }
    w.section("params", params.buf);

    let mut optim = Writer::new();
    optim.u32(trainer.optimizer.accum_grad.len() as u32);
    for (name, eg) in &trainer.optimizer.accum_grad {
        optim.str(name);
        optim.floats(eg);
        let eu = trainer
            .optimizer
            .accum_update
            .get(name)
            .ok_or_else(|| Error::Train(format!("optimizer state for `{name}` is half-missing")))?;
        optim.floats(eu);
    }
    w.section("optim", optim.buf);

    let mut train = Writer::new();
    train.u64(trainer.epoch as u64);
    train.floats(&trainer.val_history);
    w.section("train", train.buf);

    let mut rng = Writer::new();
    rng.bytes(&trainer.rng.get_seed());
    rng.bytes(&trainer.rng.get_word_pos().to_le_bytes());
    w.section("rng", rng.buf);

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&w.buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint {
                offset: self.at as u64,
                msg: format!("unexpected end of file reading {what}"),
            });
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.at;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| Error::Checkpoint {
            offset: at as u64,
            msg: format!("invalid utf-8 in {what}"),
        })
    }

    fn floats(&mut self, what: &str) -> Result<Vec<f64>> {
        let len = self.u64(what)? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: format!("bad magic {magic:?}, not a checkpoint"),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            msg: format!("unsupported version {version} (expected {VERSION})"),
        });
    }

    let mut config: Option<RunConfig> = None;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut optimizer = AdadeltaState::default();
    let mut epoch = 0usize;
    let mut val_history = Vec::new();
    let mut rng_seed = [0u8; 32];
    let mut rng_word_pos = 0u128;
    let mut saw = [false; 5];

    while r.at < r.buf.len() {
        let name = r.str("section name")?;
        let len = r.u64("section length")? as usize;
        let section_start = r.at;
        let payload = r.take(len, &format!("section `{name}`"))?;
        let mut s = Reader { buf: payload, at: 0 };
        // re-anchor section-relative offsets to the whole file
        let abs = |e: Error| -> Error {
            match e {
                Error::Checkpoint { offset, msg } => Error::Checkpoint {
                    offset: offset + section_start as u64,
                    msg,
                },
                other => other,
            }
        };
        match name.as_str() {
            "config" => {
                let text = std::str::from_utf8(payload).map_err(|_| Error::Checkpoint {
                    offset: section_start as u64,
                    msg: "config section is not utf-8".into(),
                })?;
                config = Some(RunConfig::parse(text)?);
                saw[0] = true;
            }
            "params" => {
                let count = s.u32("param count").map_err(&abs)?;
                for _ in 0..count {
                    let pname = s.str("param name").map_err(&abs)?;
                    let ndim = s.take(1, "param ndim").map_err(&abs)?[0] as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(s.u64("param dim").map_err(&abs)? as usize);
                    }
                    let numel: usize = shape.iter().product();
                    let mut values = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        values.push(s.f64("param values").map_err(&abs)?);
                    }
                    params.insert(pname, Tensor::new(shape, values)?);
                }
                saw[1] = true;
            }
            "optim" => {
                let count = s.u32("optim count").map_err(&abs)?;
                for _ in 0..count {
                    let pname = s.str("optim name").map_err(&abs)?;
                    let eg = s.floats("optim grad accum").map_err(&abs)?;
                    let eu = s.floats("optim update accum").map_err(&abs)?;
                    optimizer.accum_grad.insert(pname.clone(), eg);
                    optimizer.accum_update.insert(pname, eu);
                }
                saw[2] = true;
            }
            "train" => {
                epoch = s.u64("epoch").map_err(&abs)? as usize;
                val_history = s.floats("val history").map_err(&abs)?;
                saw[3] = true;
            }
            "rng" => {
                rng_seed.copy_from_slice(s.take(32, "rng seed").map_err(&abs)?);
                let wp = s.take(16, "rng word pos").map_err(&abs)?;
                rng_word_pos = u128::from_le_bytes(wp.try_into().unwrap());
                saw[4] = true;
            }
            other => {
                return Err(Error::Checkpoint {
                    offset: section_start as u64,
                    msg: format!("unknown section `{other}`"),
                });
            }
        }
    }
    if !saw.iter().all(|&x| x) {
        return Err(Error::Checkpoint {
            offset: r.at as u64,
            msg: "checkpoint is missing required sections".into(),
        });
    }
    Ok(Checkpoint {
        config: config.unwrap(),
        params,
        optimizer,
        epoch,
        val_history,
        rng_seed,
        rng_word_pos,
    })
}

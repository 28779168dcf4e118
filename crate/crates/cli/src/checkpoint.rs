//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "UTCK"
//! version      u32
//! kind         u8       0 = encoder, 1 = translator
//! step         u64      optimizer steps taken
//! model        u32 length + UTF-8 key=value text (architecture)
//! experiment   u32 length + UTF-8 key=value text (effective configuration)
//! count        u32      number of parameters
//! per parameter:
//!   name       u32 length + UTF-8
//!   rank       u32, then rank × u64 dimensions
//!   data       product(dimensions) × f32
//! optimizer    u8 flag; when 1: u64 step, then first and second moments,
//!              parameter by parameter, each as product(dimensions) × f32
//! ```
//!
//! Trailing bytes, short reads and unknown versions are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use unitrans_core::encoder::{EncoderConfig, SentenceEncoder};
use unitrans_core::numerics::{Adam, ParamStore};
use unitrans_core::synthlang::{parse_key_values, UnitLayout};
use unitrans_core::translator::{TranslatorConfig, TranslatorModel};
use unitrans_core::LangId;

use crate::failure::{CliResult, Failure};

pub const MAGIC: &[u8; 4] = b"UTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Encoder,
    Translator,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Encoder => 0,
            ModelKind::Translator => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModelKind::Encoder => "encoder",
            ModelKind::Translator => "translator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub step: u64,
    pub model_config: String,
    pub experiment_config: String,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

fn snapshot(params: &ParamStore) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect()
}

fn optimizer_state(adam: Option<&Adam>) -> Option<OptimizerState> {
    adam.map(|a| {
        let (m, v) = a.moments();
        OptimizerState {
            step: a.step_count(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    })
}

fn kv_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Failure::checkpoint(format!(
                    "truncated checkpoint while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> CliResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> CliResult<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Failure::checkpoint(format!("{what} is not UTF-8")))
    }

    fn floats(&mut self, n: usize, what: &str) -> CliResult<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Failure::checkpoint(format!("{what}: size overflow")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_string(&mut out, &self.model_config);
        put_string(&mut out, &self.experiment_config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            put_string(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for m in &o.m {
                    put_floats(&mut out, m);
                }
                for v in &o.v {
                    put_floats(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Failure::checkpoint("not a checkpoint: bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Failure::checkpoint(format!(
                "checkpoint format version {version} is not supported (expected {VERSION})"
            )));
        }
        let kind = match r.u8("kind")? {
            0 => ModelKind::Encoder,
            1 => ModelKind::Translator,
            k => return Err(Failure::checkpoint(format!("unknown model kind tag {k}"))),
        };
        let step = r.u64("step")?;
        let model_config = r.string("model config")?;
        let experiment_config = r.string("experiment config")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<CliResult<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Failure::checkpoint(format!("{name}: shape overflow")))?;
            let data = r.floats(len, &name)?;
            params.push((name, shape, data));
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let mut read_all = |what: &str| -> CliResult<Vec<Vec<f32>>> {
                    params.iter().map(|(_, _, d)| r.floats(d.len(), what)).collect()
                };
                let m = read_all("first moments")?;
                let v = read_all("second moments")?;
                Some(OptimizerState { step, m, v })
            }
            f => return Err(Failure::checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Failure::checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            step,
            model_config,
            experiment_config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Failure::io(path, e))
    }

    /// Reads a checkpoint; a missing file is a checkpoint failure.
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Failure::checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|f| Failure::checkpoint(format!("{}: {}", path.display(), f.message)))
    }

    fn expect(&self, kind: ModelKind) -> CliResult<BTreeMap<String, String>> {
        if self.kind != kind {
            return Err(Failure::checkpoint(format!(
                "expected a {} checkpoint, found a {} checkpoint",
                kind.name(),
                self.kind.name()
            )));
        }
        let entries = parse_key_values(&self.model_config, Path::new("<checkpoint model config>"))
            .map_err(|e| Failure::checkpoint(e.to_string()))?;
        Ok(entries.into_iter().map(|(_, k, v)| (k, v)).collect())
    }

    pub fn from_encoder(model: &SentenceEncoder, optimizer: Option<&Adam>, experiment: &str) -> Self {
        let c = model.config();
        Self {
            kind: ModelKind::Encoder,
            step: optimizer.map_or(0, Adam::step_count),
            model_config: kv_text(&[
                ("vocab_size", c.vocab_size.to_string()),
                ("d_model", c.d_model.to_string()),
                ("dim", c.dim.to_string()),
                ("layers", c.layers.to_string()),
                ("heads", c.heads.to_string()),
                ("ffn", c.ffn.to_string()),
            ]),
            experiment_config: experiment.to_string(),
            params: snapshot(model.params()),
            optimizer: optimizer_state(optimizer),
        }
    }

    pub fn from_translator(model: &TranslatorModel, optimizer: Option<&Adam>, experiment: &str) -> Self {
        let c = model.config();
        let targets: Vec<String> = c.targets.iter().map(ToString::to_string).collect();
        Self {
            kind: ModelKind::Translator,
            step: optimizer.map_or(0, Adam::step_count),
            model_config: kv_text(&[
                ("dim", c.dim.to_string()),
                ("n_sub", c.n_sub.to_string()),
                ("d_model", c.d_model.to_string()),
                ("layers", c.layers.to_string()),
                ("heads", c.heads.to_string()),
                ("ffn", c.ffn.to_string()),
                ("kernel", c.kernel.to_string()),
                ("semantic_encoder", c.semantic_encoder.to_string()),
                ("alpha", c.alpha.to_string()),
                ("lambda_dur", c.lambda_dur.to_string()),
                ("targets", targets.join(",")),
                ("layout", model.vocab().layout().to_string()),
                ("max_train_reduced", model.max_train_reduced().to_string()),
            ]),
            experiment_config: experiment.to_string(),
            params: snapshot(model.params()),
            optimizer: optimizer_state(optimizer),
        }
    }

    pub fn to_encoder(&self) -> CliResult<SentenceEncoder> {
        let kv = self.expect(ModelKind::Encoder)?;
        let config = EncoderConfig {
            vocab_size: field(&kv, "vocab_size")?,
            d_model: field(&kv, "d_model")?,
            dim: field(&kv, "dim")?,
            layers: field(&kv, "layers")?,
            heads: field(&kv, "heads")?,
            ffn: field(&kv, "ffn")?,
        };
        let mut model = SentenceEncoder::new(config, 0).map_err(|e| Failure::checkpoint(e.to_string()))?;
        model
            .params_mut()
            .load(&self.params)
            .map_err(|e| Failure::checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_translator(&self) -> CliResult<TranslatorModel> {
        let kv = self.expect(ModelKind::Translator)?;
        let targets: String = field(&kv, "targets")?;
        let targets = targets
            .split(',')
            .map(|t| LangId::new(t).map_err(|e| Failure::checkpoint(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?;
        let config = TranslatorConfig {
            dim: field(&kv, "dim")?,
            n_sub: field(&kv, "n_sub")?,
            d_model: field(&kv, "d_model")?,
            layers: field(&kv, "layers")?,
            heads: field(&kv, "heads")?,
            ffn: field(&kv, "ffn")?,
            kernel: field(&kv, "kernel")?,
            semantic_encoder: field(&kv, "semantic_encoder")?,
            alpha: field(&kv, "alpha")?,
            lambda_dur: field(&kv, "lambda_dur")?,
            targets,
        };
        let layout: UnitLayout = field(&kv, "layout")?;
        let mut model = TranslatorModel::new(config, layout, 0).map_err(|e| Failure::checkpoint(e.to_string()))?;
        model
            .params_mut()
            .load(&self.params)
            .map_err(|e| Failure::checkpoint(e.to_string()))?;
        model.set_max_train_reduced(field(&kv, "max_train_reduced")?);
        Ok(model)
    }
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> CliResult<T> {
    let v = kv
        .get(key)
        .ok_or_else(|| Failure::checkpoint(format!("model config lacks {key}")))?;
    v.parse()
        .map_err(|_| Failure::checkpoint(format!("model config {key} has bad value {v:?}")))
}

//! Checkpoint format:
//!
//! ```text
//! KGCTX-CKPT v1
//! config <bytes>
//! <model config as key = value lines, plus `step = N`>
//! vocab <bytes>
//! <tokenizer text>
//! run <bytes>
//! <resolved run config>
//! tensors <float count>
//! <little-endian f32 parameters in declaration order>
//! ```

use super::config::ModelConfig;
use super::scalar::Scalar;
use super::transformer::Seq2SeqModel;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

const MAGIC: &str = "KGCTX-CKPT v1\n";

pub struct Checkpoint<T: Scalar> {
    pub model: Seq2SeqModel<T>,
    pub tokenizer: Tokenizer,
    /// Resolved run configuration the model was trained with.
    pub run_config: String,
}

fn push_block(out: &mut Vec<u8>, name: &str, body: &str) {
    out.extend_from_slice(format!("{name} {}\n", body.len()).as_bytes());
    out.extend_from_slice(body.as_bytes());
}

pub fn encode<T: Scalar>(model: &Seq2SeqModel<T>, tokenizer: &Tokenizer, run_config: &str) -> Vec<u8> {
    let mut out = MAGIC.as_bytes().to_vec();
    let cfg = format!("{}step = {}\n", model.config().to_text(), model.step());
    push_block(&mut out, "config", &cfg);
    push_block(&mut out, "vocab", &tokenizer.to_text());
    push_block(&mut out, "run", run_config);
    out.extend_from_slice(format!("tensors {}\n", model.num_params()).as_bytes());
    out.reserve(model.num_params() * 4);
    for v in model.params() {
        let f = v.to_f32().unwrap_or(f32::NAN);
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("non-UTF-8 header".into()))
    }

    fn header(&mut self, name: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected `{name} <n>`, found `{line}`")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn block(&mut self, name: &str) -> Result<&'a str> {
        let n = self.header(name)?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format(format!("{name} block is not UTF-8")))
    }
}

pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    if !buf.starts_with(MAGIC.as_bytes()) {
        return Err(Error::Format("not a KGCTX-CKPT v1 file".into()));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let cfg_text = r.block("config")?;
    let mut step = 0;
    let mut model_lines = String::new();
    for line in cfg_text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("step", v)) => {
                step = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad step `{v}`")))?
            }
            _ => {
                model_lines.push_str(line);
                model_lines.push('\n');
            }
        }
    }
    let config = ModelConfig::from_text(&model_lines)?;
    let tokenizer = Tokenizer::from_text(r.block("vocab")?)?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::Format(format!(
            "checkpoint vocab has {} pieces, model expects {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let run_config = r.block("run")?.to_owned();
    let n = r.header("tensors")?;
    if n != config.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {n} floats, config implies {}",
            config.param_count()
        )));
    }
    let raw = r.take(n * 4)?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
        .collect();
    Ok(Checkpoint {
        model: Seq2SeqModel::from_params(config, params, step)?,
        tokenizer,
        run_config,
    })
}

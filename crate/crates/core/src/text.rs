//! Closed-vocabulary tokenizer and the jointly trained prompt encoder.
//!
//! The encoder maps a token sequence to an `L x d` context matrix: token plus
//! learned positional embeddings, a stack of pre-norm self-attention blocks,
//! a final layer norm, and PAD rows zeroed. PAD positions are excluded from
//! every attention softmax, so outputs never depend on what sits there.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{invalid, io_err, json_err, Result};
use crate::nn::{raw_param, LayerNorm, Linear};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const WEEKDAYS: [&str; 7] = [
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];

const TEMPLATE_WORDS: &[&str] = &[
    "a",
    "on",
    "the",
    "whole",
    "network",
    "minor",
    "general",
    "serious",
    "traffic",
    "accident",
    "road",
    "construction",
    "closure",
    "heavy",
    "rain",
    "crowd",
    "gathering",
    "ring",
    "avenue",
    "street",
    "boulevard",
    "east",
    "west",
    "north",
    "south",
    "section",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Embedding rows reserved; may exceed `tokens.len()`.
    pub size: usize,
    /// `tokens[id]` is the surface form of `id`.
    pub tokens: Vec<String>,
}

impl Vocabulary {
    /// The fixed vocabulary covering every prompt the scenario templates emit
    /// at a 4-minute sampling interval.
    pub fn closed() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<unk>", "<bos>", "<eos>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(WEEKDAYS.iter().map(|s| s.to_string()));
        // hours 00-23, then the remaining 4-minute marks
        tokens.extend((0..24).map(|h| format!("{h:02}")));
        tokens.extend((24..60).step_by(4).map(|m| format!("{m:02}")));
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend((1..=9).map(|d| d.to_string()));
        Self { size: 96, tokens }
    }

    pub fn validate(&self) -> Result<()> {
        let specials = ["<pad>", "<unk>", "<bos>", "<eos>"];
        if self.tokens.len() < 4 || self.tokens[..4] != specials {
            return Err(invalid("vocabulary must start with <pad> <unk> <bos> <eos>"));
        }
        if self.size < self.tokens.len() {
            return Err(invalid("vocabulary size smaller than its token list"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(invalid(format!("duplicate token `{dup}`")));
        }
        Ok(())
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, s).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        let v: Self = serde_json::from_str(&s).map_err(json_err(path))?;
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// words dropped to fit the length limit
    pub truncated: usize,
    pub unknown: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary, l_max: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(invalid("prompt text is empty"));
    }
    if l_max < 2 {
        return Err(invalid("sequence length must fit BOS and EOS"));
    }
    let words = split_words(text);
    let room = l_max - 2;
    let truncated = words.len().saturating_sub(room);
    let mut ids = Vec::with_capacity(l_max);
    ids.push(BOS);
    let mut unknown = 0;
    for w in words.iter().take(room) {
        let id = vocab.id(w);
        unknown += usize::from(id == UNK);
        ids.push(id);
    }
    ids.push(EOS);
    let used = ids.len();
    ids.resize(l_max, PAD);
    let mask = (0..l_max).map(|i| i < used).collect();
    Ok(TokenSequence {
        ids,
        mask,
        truncated,
        unknown,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub l_max: usize,
    pub d_ctx: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 96,
            l_max: 24,
            d_ctx: 32,
            heads: 2,
            blocks: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    heads: Vec<Head>,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Encoded prompt: `l_max x d_ctx` rows and the key mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_ctx;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(invalid("d_ctx must be divisible by the head count"));
        }
        let dh = d / config.heads;
        let tok_emb = raw_param(store, "text.tok_emb", &[config.vocab_size, d], 0.5, rng)?;
        let pos_emb = raw_param(store, "text.pos_emb", &[config.l_max, d], 0.5, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = format!("text.block{b}");
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let hp = format!("{p}.head{h}");
                heads.push(Head {
                    q: Linear::new(store, &format!("{hp}.q"), d, dh, false, rng)?,
                    k: Linear::new(store, &format!("{hp}.k"), d, dh, false, rng)?,
                    v: Linear::new(store, &format!("{hp}.v"), d, dh, false, rng)?,
                    o: Linear::new(store, &format!("{hp}.o"), dh, d, false, rng)?,
                });
            }
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                heads,
                ln_mlp: LayerNorm::new(store, &format!("{p}.ln_mlp"), d)?,
                fc1: Linear::new(store, &format!("{p}.fc1"), d, 2 * d, true, rng)?,
                fc2: Linear::new(store, &format!("{p}.fc2"), 2 * d, d, true, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, "text.ln_out", d)?;
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_out,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Record the encoder on `tape`; returns the `l_max x d_ctx` context.
    pub fn forward(&self, tape: &mut Tape, tokens: &TokenSequence) -> Result<Var> {
        let l = self.config.l_max;
        if tokens.ids.len() != l || tokens.mask.len() != l {
            return Err(invalid(format!("token sequence must have length {l}")));
        }
        let dh = self.config.d_ctx / self.config.heads;
        let table = tape.param(self.tok_emb);
        let tok = tape.embedding(table, &tokens.ids)?;
        let pos = tape.param(self.pos_emb);
        let mut x = tape.add(tok, pos)?;
        for block in &self.blocks {
            let h = block.ln_attn.forward(tape, x)?;
            let mut attn: Option<Var> = None;
            for head in &block.heads {
                let q = head.q.forward(tape, h)?;
                let k = head.k.forward(tape, h)?;
                let v = head.v.forward(tape, h)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let a = tape.softmax(scores, Some(&tokens.mask))?;
                let ctx = tape.matmul(a, v)?;
                let out = head.o.forward(tape, ctx)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
            }
            x = tape.add(x, attn.expect("at least one head"))?;
            let h = block.ln_mlp.forward(tape, x)?;
            let h = block.fc1.forward(tape, h)?;
            let h = tape.silu(h);
            let h = block.fc2.forward(tape, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.ln_out.forward(tape, x)?;
        let keep: Vec<f64> = tokens.mask.iter().map(|m| f64::from(u8::from(*m))).collect();
        let keep = tape.constant(Tensor::new([l], keep)?);
        Ok(tape.mul_col(x, keep)?)
    }

    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<ContextEmbedding> {
        let mut tape = Tape::with_params(store);
        let out = self.forward(&mut tape, tokens)?;
        Ok(ContextEmbedding {
            values: tape.value(out).clone(),
            mask: tokens.mask.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttg_tensor::rng::stream;

    #[test]
    fn closed_vocabulary_is_valid() {
        let v = Vocabulary::closed();
        v.validate().unwrap();
        assert!(v.tokens.len() <= v.size);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
    }

    #[test]
    fn tokenize_time_only() {
        let v = Vocabulary::closed();
        let t = tokenize("Tuesday, 01:00.", &v, 24).unwrap();
        let expected = [BOS, v.id("tuesday"), v.id("01"), v.id("00"), EOS];
        assert_eq!(&t.ids[..5], &expected);
        assert!(t.ids[5..].iter().all(|i| *i == PAD));
        assert_eq!(t.len(), 5);
        assert!(t.mask[..5].iter().all(|m| *m) && t.mask[5..].iter().all(|m| !*m));
        assert_eq!(t.unknown, 0);
    }

    #[test]
    fn tokenize_errors_and_unknowns() {
        let v = Vocabulary::closed();
        assert!(tokenize("", &v, 24).is_err());
        assert!(tokenize("  ", &v, 24).is_err());
        let t = tokenize("blizzard", &v, 24).unwrap();
        assert_eq!(t.ids[1], UNK);
        assert_eq!(t.unknown, 1);
    }

    #[test]
    fn tokenize_truncates() {
        let v = Vocabulary::closed();
        let long = "a ".repeat(30);
        let t = tokenize(&long, &v, 24).unwrap();
        assert_eq!(t.truncated, 8);
        assert_eq!(t.ids[0], BOS);
        assert_eq!(t.ids[23], EOS);
        assert!(t.mask.iter().all(|m| *m));
    }

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, EncoderConfig::default(), &mut stream(5, 0)).unwrap();
        (store, enc)
    }

    #[test]
    fn pad_rows_are_zero_and_pad_ids_do_not_matter() {
        let (store, enc) = encoder();
        let v = Vocabulary::closed();
        let tokens = tokenize("Friday, 18:20. A general traffic accident on Ring 2 East.", &v, 24).unwrap();
        let out = enc.encode(&store, &tokens).unwrap();
        let d = 32;
        for (i, m) in tokens.mask.iter().enumerate() {
            let row = &out.values.data()[i * d..(i + 1) * d];
            if *m {
                assert!(row.iter().any(|x| *x != 0.0));
            } else {
                assert!(row.iter().all(|x| *x == 0.0));
            }
        }
        let mut poked = tokens.clone();
        for (id, m) in poked.ids.iter_mut().zip(&poked.mask) {
            if !*m {
                *id = 17;
            }
        }
        assert_eq!(enc.encode(&store, &poked).unwrap(), out);
    }

    #[test]
    fn encoding_is_position_sensitive() {
        let (store, enc) = encoder();
        let v = Vocabulary::closed();
        let a = "Monday, 08:00. A serious traffic accident on Ring 1 East. A minor road closure on Avenue 3.";
        let b = "Monday, 08:00. A minor road closure on Avenue 3. A serious traffic accident on Ring 1 East.";
        let ea = enc.encode(&store, &tokenize(a, &v, 24).unwrap()).unwrap();
        let eb = enc.encode(&store, &tokenize(b, &v, 24).unwrap()).unwrap();
        assert!(ea.values.max_abs_diff(&eb.values) > 1e-6);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc) = encoder();
        let v = Vocabulary::closed();
        let t = tokenize("Sunday, 23:56.", &v, 24).unwrap();
        assert_eq!(enc.encode(&store, &t).unwrap(), enc.encode(&store, &t).unwrap());
    }
}

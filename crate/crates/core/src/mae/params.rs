//! Flat parameter storage with a named layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{MaeModelConfig, MLP_RATIO};
use crate::error::{Error, Result};
use crate::rng;

/// A contiguous `rows x cols` block of the flat parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    pub entries: Vec<LayoutEntry>,
    next: usize,
}

impl LayoutBuilder {
    pub fn push(&mut self, name: String, rows: usize, cols: usize, kind: ParamKind) -> Slot {
        let slot = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.entries.push(LayoutEntry {
            name,
            offset: self.next,
            rows,
            cols,
            kind,
        });
        self.next += rows * cols;
        slot
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearSlots {
        LinearSlots {
            w: self.push(format!("{name}.w"), d_in, d_out, ParamKind::Weight),
            b: self.push(format!("{name}.b"), 1, d_out, ParamKind::Bias),
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> NormSlots {
        NormSlots {
            gamma: self.push(format!("{name}.gamma"), 1, dim, ParamKind::NormScale),
            beta: self.push(format!("{name}.beta"), 1, dim, ParamKind::NormShift),
        }
    }

    pub fn block(&mut self, name: &str, dim: usize) -> BlockSlots {
        let hidden = MLP_RATIO * dim;
        BlockSlots {
            ln1: self.norm(&format!("{name}.ln1"), dim),
            qkv: self.linear(&format!("{name}.qkv"), dim, 3 * dim),
            proj: self.linear(&format!("{name}.proj"), dim, dim),
            ln2: self.norm(&format!("{name}.ln2"), dim),
            fc1: self.linear(&format!("{name}.fc1"), dim, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearSlots {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormSlots {
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSlots {
    pub ln1: NormSlots,
    pub qkv: LinearSlots,
    pub proj: LinearSlots,
    pub ln2: NormSlots,
    pub fc1: LinearSlots,
    pub fc2: LinearSlots,
}

/// Typed offsets of every tensor in a masked autoencoder.
pub(crate) struct MaeLayout {
    pub patch_embed: LinearSlots,
    pub enc_pos: Slot,
    pub enc_blocks: Vec<BlockSlots>,
    pub enc_norm: NormSlots,
    pub dec_embed: LinearSlots,
    pub mask_token: Slot,
    pub dec_pos: Slot,
    pub dec_blocks: Vec<BlockSlots>,
    pub dec_norm: NormSlots,
    pub pred: LinearSlots,
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl MaeLayout {
    pub fn new(c: &MaeModelConfig) -> Self {
        let n = c.num_patches();
        let mut b = LayoutBuilder::default();
        let patch_embed = b.linear("encoder.patch_embed", c.patch_dim(), c.embed_dim);
        let enc_pos = b.push("encoder.pos".into(), n, c.embed_dim, ParamKind::Embedding);
        let enc_blocks = (0..c.depth)
            .map(|i| b.block(&format!("encoder.block{i}"), c.embed_dim))
            .collect();
        let enc_norm = b.norm("encoder.norm", c.embed_dim);
        let dec_embed = b.linear("decoder.embed", c.embed_dim, c.decoder_dim);
        let mask_token = b.push(
            "decoder.mask_token".into(),
            1,
            c.decoder_dim,
            ParamKind::Embedding,
        );
        let dec_pos = b.push("decoder.pos".into(), n, c.decoder_dim, ParamKind::Embedding);
        let dec_blocks = (0..c.decoder_depth)
            .map(|i| b.block(&format!("decoder.block{i}"), c.decoder_dim))
            .collect();
        let dec_norm = b.norm("decoder.norm", c.decoder_dim);
        let pred = b.linear("decoder.pred", c.decoder_dim, c.patch_dim());
        let total = b.total();
        MaeLayout {
            patch_embed,
            enc_pos,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            pred,
            entries: b.entries,
            total,
        }
    }
}

/// All weights of one model as a flat `f64` array plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
    pub rng_seed: u64,
}

impl ParameterStore {
    /// Seeded initialization: weights and embeddings uniform in
    /// `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`, biases and norm
    /// shifts zero, norm scales one.
    pub fn init(config: &MaeModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = MaeLayout::new(config);
        let mut rng = rng::rng_for(seed, &[0x1417]);
        let mut values = vec![0.0; layout.total];
        for e in &layout.entries {
            let block = &mut values[e.offset..e.offset + e.rows * e.cols];
            match e.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    let s = (6.0 / (e.rows + e.cols) as f64).sqrt();
                    block.iter_mut().for_each(|v| *v = rng.gen_range(-s..=s));
                }
                ParamKind::NormScale => block.fill(1.0),
                ParamKind::Bias | ParamKind::NormShift => {}
            }
        }
        Ok(ParameterStore {
            values,
            layout: layout.entries,
            rng_seed: seed,
        })
    }

    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: &MaeModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = MaeLayout::new(config);
        Ok(ParameterStore {
            values: vec![0.0; layout.total],
            layout: layout.entries,
            rng_seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let e = self.entry(name)?;
        Some(&self.values[e.offset..e.offset + e.rows * e.cols])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.entry(name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.rows * e.cols])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks that the store was built for `config` and that its layout
    /// tiles the value array exactly.
    pub fn check_matches(&self, config: &MaeModelConfig) -> Result<()> {
        let expected = MaeLayout::new(config);
        if self.layout != expected.entries || self.values.len() != expected.total {
            return Err(Error::domain(format!(
                "parameter store ({} values) does not match model layout ({} values)",
                self.values.len(),
                expected.total
            )));
        }
        Ok(())
    }
}

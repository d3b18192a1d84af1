//! Forward and reverse passes of the masked autoencoder.
//!
//! Pre-norm transformer blocks (`x + attn(ln(x))`, then `h + mlp(ln(h))`)
//! with fused QKV projections and a tanh-GELU MLP. The encoder sees only
//! visible patches; the decoder sees every position, with a shared learned
//! mask token standing in for hidden ones.

use super::config::MaeModelConfig;
use super::params::{BlockSlots, LinearSlots, MaeLayout, NormSlots, ParameterStore, Slot};
use super::patch::MaskSet;
use super::tensor::{
    affine, affine_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_in_place,
    Matrix, NormCache,
};
use crate::error::{Error, Result};

/// Decoder output plus the encoder latents of the visible patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeOutput {
    /// One predicted patch vector per position.
    pub reconstruction: Matrix,
    /// One latent vector per visible patch, in ascending patch order.
    pub latents: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    /// Same layout as [`ParameterStore::values`].
    pub grad: Vec<f64>,
}

/// Mean over masked patches of the per-patch mean squared pixel error.
pub fn mae_loss(reconstruction: &Matrix, target: &Matrix, mask: &MaskSet) -> Result<f64> {
    if mask.masked().is_empty() {
        return Err(Error::domain(
            "reconstruction loss is undefined with no masked patches",
        ));
    }
    if (reconstruction.rows, reconstruction.cols) != (target.rows, target.cols)
        || target.rows != mask.total()
    {
        return Err(Error::domain(format!(
            "loss shapes differ: reconstruction {}x{}, target {}x{}, mask over {}",
            reconstruction.rows,
            reconstruction.cols,
            target.rows,
            target.cols,
            mask.total()
        )));
    }
    let per_patch = |p: usize| {
        let sq: f64 = reconstruction
            .row(p)
            .iter()
            .zip(target.row(p))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sq / target.cols as f64
    };
    Ok(mask.masked().iter().map(|&p| per_patch(p)).sum::<f64>() / mask.masked().len() as f64)
}

pub fn forward(
    params: &ParameterStore,
    config: &MaeModelConfig,
    patches: &Matrix,
    mask: &MaskSet,
) -> Result<MaeOutput> {
    MaeModel::new(config)?.forward(params, patches, mask)
}

pub fn gradient(
    params: &ParameterStore,
    config: &MaeModelConfig,
    patches: &Matrix,
    mask: &MaskSet,
) -> Result<LossGradient> {
    let model = MaeModel::new(config)?;
    let mut grad = vec![0.0; params.len()];
    let loss = model.accumulate_gradient(params, patches, mask, 1.0, &mut grad)?;
    Ok(LossGradient { loss, grad })
}

/// A model architecture with its resolved parameter layout.
pub struct MaeModel {
    config: MaeModelConfig,
    layout: MaeLayout,
}

impl MaeModel {
    pub fn new(config: &MaeModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(MaeModel {
            config: *config,
            layout: MaeLayout::new(config),
        })
    }

    pub fn config(&self) -> &MaeModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    fn check(&self, params: &ParameterStore, patches: &Matrix, mask: &MaskSet) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::domain(format!(
                "parameter store has {} values, model needs {}",
                params.len(),
                self.layout.total
            )));
        }
        let (n, d) = (self.config.num_patches(), self.config.patch_dim());
        if patches.rows != n || patches.cols != d {
            return Err(Error::domain(format!(
                "expected {n} patches of length {d}, got {}x{}",
                patches.rows, patches.cols
            )));
        }
        if mask.total() != n {
            return Err(Error::domain(format!(
                "mask covers {} patches, image has {n}",
                mask.total()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        params: &ParameterStore,
        patches: &Matrix,
        mask: &MaskSet,
    ) -> Result<MaeOutput> {
        self.check(params, patches, mask)?;
        let p = &params.values;
        let visible = mask.visible();
        let (latents, _) = self.encode_cached(p, patches, &visible);
        let (reconstruction, _) = self.decode_cached(p, &latents, &visible);
        Ok(MaeOutput {
            reconstruction,
            latents,
        })
    }

    /// Adds `scale * dLoss/dParams` into `grad` and returns the loss.
    pub fn accumulate_gradient(
        &self,
        params: &ParameterStore,
        patches: &Matrix,
        mask: &MaskSet,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check(params, patches, mask)?;
        if grad.len() != params.len() {
            return Err(Error::domain(
                "gradient buffer length differs from parameter count",
            ));
        }
        let p = &params.values;
        let visible = mask.visible();
        let (latents, enc) = self.encode_cached(p, patches, &visible);
        let (recon, dec) = self.decode_cached(p, &latents, &visible);
        let loss = mae_loss(&recon, patches, mask)?;

        let norm = scale * 2.0 / (mask.masked().len() * patches.cols) as f64;
        let mut drecon = Matrix::zeros(recon.rows, recon.cols);
        for &m in mask.masked() {
            let (r, t) = (recon.row(m), patches.row(m));
            for (j, d) in drecon.row_mut(m).iter_mut().enumerate() {
                *d = norm * (r[j] - t[j]);
            }
        }
        let dlatents = self.decode_backward(p, &dec, &drecon, grad);
        self.encode_backward(p, &enc, &dlatents, grad);
        Ok(loss)
    }

    /// Encoder latents for the given visible patch indices.
    pub fn encode(
        &self,
        params: &ParameterStore,
        patches: &Matrix,
        visible: &[usize],
    ) -> Result<Matrix> {
        self.check(params, patches, &MaskSet::empty(self.config.num_patches()))?;
        Ok(self.encode_cached(&params.values, patches, visible).0)
    }

    pub(crate) fn encode_cached(
        &self,
        p: &[f64],
        patches: &Matrix,
        visible: &[usize],
    ) -> (Matrix, EncoderCache) {
        let l = &self.layout;
        let d = self.config.embed_dim;
        let mut xp = Matrix::zeros(visible.len(), patches.cols);
        for (j, &v) in visible.iter().enumerate() {
            xp.row_mut(j).copy_from_slice(patches.row(v));
        }
        let mut x = affine(
            &xp,
            &p[l.patch_embed.w.range()],
            &p[l.patch_embed.b.range()],
            d,
        );
        let pos = &p[l.enc_pos.range()];
        for (j, &v) in visible.iter().enumerate() {
            for (a, b) in x.row_mut(j).iter_mut().zip(&pos[v * d..(v + 1) * d]) {
                *a += b;
            }
        }
        let mut blocks = Vec::with_capacity(l.enc_blocks.len());
        for s in &l.enc_blocks {
            let (y, cache) = block_forward(p, s, &x, self.config.heads);
            blocks.push(cache);
            x = y;
        }
        let (z, norm) = layer_norm(
            &x,
            &p[l.enc_norm.gamma.range()],
            &p[l.enc_norm.beta.range()],
        );
        (
            z,
            EncoderCache {
                xp,
                visible: visible.to_vec(),
                blocks,
                norm,
            },
        )
    }

    pub(crate) fn encode_backward(
        &self,
        p: &[f64],
        cache: &EncoderCache,
        dz: &Matrix,
        grad: &mut [f64],
    ) {
        let l = &self.layout;
        let d = self.config.embed_dim;
        let mut dx = norm_backward(p, &l.enc_norm, &cache.norm, dz, grad);
        for (s, bc) in l.enc_blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(p, s, bc, &dx, grad, self.config.heads);
        }
        {
            let gpos = &mut grad[l.enc_pos.range()];
            for (j, &v) in cache.visible.iter().enumerate() {
                for (g, dv) in gpos[v * d..(v + 1) * d].iter_mut().zip(dx.row(j)) {
                    *g += dv;
                }
            }
        }
        linear_backward(p, &l.patch_embed, &cache.xp, &dx, grad);
    }

    fn decode_cached(
        &self,
        p: &[f64],
        latents: &Matrix,
        visible: &[usize],
    ) -> (Matrix, DecoderCache) {
        let l = &self.layout;
        let dd = self.config.decoder_dim;
        let n = self.config.num_patches();
        let e = affine(
            latents,
            &p[l.dec_embed.w.range()],
            &p[l.dec_embed.b.range()],
            dd,
        );
        let mask_token = &p[l.mask_token.range()];
        let pos = &p[l.dec_pos.range()];
        let mut slot_of = vec![None; n];
        for (j, &v) in visible.iter().enumerate() {
            slot_of[v] = Some(j);
        }
        let mut x = Matrix::zeros(n, dd);
        for (i, s) in slot_of.iter().enumerate() {
            let src = match s {
                Some(j) => e.row(*j),
                None => mask_token,
            };
            for ((o, a), b) in x
                .row_mut(i)
                .iter_mut()
                .zip(src)
                .zip(&pos[i * dd..(i + 1) * dd])
            {
                *o = a + b;
            }
        }
        let mut blocks = Vec::with_capacity(l.dec_blocks.len());
        for s in &l.dec_blocks {
            let (y, cache) = block_forward(p, s, &x, self.config.heads);
            blocks.push(cache);
            x = y;
        }
        let (t, norm) = layer_norm(
            &x,
            &p[l.dec_norm.gamma.range()],
            &p[l.dec_norm.beta.range()],
        );
        let recon = affine(
            &t,
            &p[l.pred.w.range()],
            &p[l.pred.b.range()],
            self.config.patch_dim(),
        );
        (
            recon,
            DecoderCache {
                latents: latents.clone(),
                slot_of,
                blocks,
                norm,
                normed: t,
            },
        )
    }

    fn decode_backward(
        &self,
        p: &[f64],
        cache: &DecoderCache,
        drecon: &Matrix,
        grad: &mut [f64],
    ) -> Matrix {
        let l = &self.layout;
        let dd = self.config.decoder_dim;
        let dt = linear_backward(p, &l.pred, &cache.normed, drecon, grad);
        let mut dx = norm_backward(p, &l.dec_norm, &cache.norm, &dt, grad);
        for (s, bc) in l.dec_blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(p, s, bc, &dx, grad, self.config.heads);
        }
        let mut de = Matrix::zeros(cache.latents.rows, dd);
        for (i, s) in cache.slot_of.iter().enumerate() {
            let row = dx.row(i);
            add_into(
                &mut grad[l.dec_pos.offset + i * dd..l.dec_pos.offset + (i + 1) * dd],
                row,
            );
            match s {
                Some(j) => de.row_mut(*j).copy_from_slice(row),
                None => add_into(&mut grad[l.mask_token.range()], row),
            }
        }
        linear_backward(p, &l.dec_embed, &cache.latents, &de, grad)
    }
}

pub(crate) struct EncoderCache {
    xp: Matrix,
    visible: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: NormCache,
}

struct DecoderCache {
    latents: Matrix,
    slot_of: Vec<Option<usize>>,
    blocks: Vec<BlockCache>,
    norm: NormCache,
    normed: Matrix,
}

struct BlockCache {
    ln1: NormCache,
    attn_in: Matrix,
    qkv: Matrix,
    probs: Vec<Matrix>,
    attn_cat: Matrix,
    ln2: NormCache,
    mlp_in: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Disjoint mutable views of two slots, `a` preceding `b`.
fn pair_mut(grad: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = grad.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

fn linear_backward(
    p: &[f64],
    s: &LinearSlots,
    x: &Matrix,
    dy: &Matrix,
    grad: &mut [f64],
) -> Matrix {
    let (dw, db) = pair_mut(grad, s.w, s.b);
    affine_backward(x, &p[s.w.range()], dy, dw, db)
}

fn norm_backward(
    p: &[f64],
    s: &NormSlots,
    cache: &NormCache,
    dy: &Matrix,
    grad: &mut [f64],
) -> Matrix {
    let (dg, db) = pair_mut(grad, s.gamma, s.beta);
    layer_norm_backward(cache, &p[s.gamma.range()], dy, dg, db)
}

fn block_forward(p: &[f64], s: &BlockSlots, x: &Matrix, heads: usize) -> (Matrix, BlockCache) {
    let d = x.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = x.rows;

    let (attn_in, ln1) = layer_norm(x, &p[s.ln1.gamma.range()], &p[s.ln1.beta.range()]);
    let qkv = affine(&attn_in, &p[s.qkv.w.range()], &p[s.qkv.b.range()], 3 * d);
    let mut attn_cat = Matrix::zeros(rows, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let mut pm = Matrix::zeros(rows, rows);
        for i in 0..rows {
            let q = &qkv.row(i)[qo..qo + dh];
            let pr = pm.row_mut(i);
            for (j, slot) in pr.iter_mut().enumerate() {
                let k = &qkv.row(j)[ko..ko + dh];
                *slot = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(pr);
        }
        for i in 0..rows {
            for j in 0..rows {
                let w = pm.data[i * rows + j];
                let v = &qkv.row(j)[vo..vo + dh];
                let out = &mut attn_cat.row_mut(i)[h * dh..(h + 1) * dh];
                for (o, vv) in out.iter_mut().zip(v) {
                    *o += w * vv;
                }
            }
        }
        probs.push(pm);
    }
    let mut hidden = affine(&attn_cat, &p[s.proj.w.range()], &p[s.proj.b.range()], d);
    hidden.add_assign(x);

    let (mlp_in, ln2) = layer_norm(&hidden, &p[s.ln2.gamma.range()], &p[s.ln2.beta.range()]);
    let pre_act = affine(
        &mlp_in,
        &p[s.fc1.w.range()],
        &p[s.fc1.b.range()],
        s.fc1.w.cols,
    );
    let act = Matrix {
        rows: pre_act.rows,
        cols: pre_act.cols,
        data: pre_act.data.iter().map(|&v| gelu(v)).collect(),
    };
    let mut out = affine(&act, &p[s.fc2.w.range()], &p[s.fc2.b.range()], d);
    out.add_assign(&hidden);

    (
        out,
        BlockCache {
            ln1,
            attn_in,
            qkv,
            probs,
            attn_cat,
            ln2,
            mlp_in,
            pre_act,
            act,
        },
    )
}

fn block_backward(
    p: &[f64],
    s: &BlockSlots,
    c: &BlockCache,
    dy: &Matrix,
    grad: &mut [f64],
    heads: usize,
) -> Matrix {
    let d = dy.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = dy.rows;

    // MLP branch
    let mut dact = linear_backward(p, &s.fc2, &c.act, dy, grad);
    for (g, &x) in dact.data.iter_mut().zip(&c.pre_act.data) {
        *g *= gelu_grad(x);
    }
    let dmlp_in = linear_backward(p, &s.fc1, &c.mlp_in, &dact, grad);
    let mut dhidden = norm_backward(p, &s.ln2, &c.ln2, &dmlp_in, grad);
    dhidden.add_assign(dy);

    // attention branch
    let dcat = linear_backward(p, &s.proj, &c.attn_cat, &dhidden, grad);
    let mut dqkv = Matrix::zeros(rows, 3 * d);
    let mut dprob = vec![0.0; rows];
    for (h, pm) in c.probs.iter().enumerate() {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..rows {
            let dout = &dcat.row(i)[h * dh..(h + 1) * dh];
            let prow = pm.row(i);
            for j in 0..rows {
                let v = &c.qkv.row(j)[vo..vo + dh];
                dprob[j] = dout.iter().zip(v).map(|(a, b)| a * b).sum();
                let w = prow[j];
                let dv = &mut dqkv.row_mut(j)[vo..vo + dh];
                for (g, o) in dv.iter_mut().zip(dout) {
                    *g += w * o;
                }
            }
            let inner: f64 = dprob.iter().zip(prow).map(|(a, b)| a * b).sum();
            for j in 0..rows {
                let ds = prow[j] * (dprob[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    let kj = c.qkv.data[j * 3 * d + ko + t];
                    let qi = c.qkv.data[i * 3 * d + qo + t];
                    dqkv.data[i * 3 * d + qo + t] += ds * kj;
                    dqkv.data[j * 3 * d + ko + t] += ds * qi;
                }
            }
        }
    }
    let dattn_in = linear_backward(p, &s.qkv, &c.attn_in, &dqkv, grad);
    let mut dx = norm_backward(p, &s.ln1, &c.ln1, &dattn_in, grad);
    dx.add_assign(&dhidden);
    dx
}

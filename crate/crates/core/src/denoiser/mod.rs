//! Causal chunk transformer predicting velocity.
//!
//! One token per latent frame. Tokens of the current chunk attend to each
//! other bidirectionally and to everything already in the [`KVCache`]:
//! two condition tokens at positions −2 and −1, clean history chunks, and
//! optionally a reflect block sharing the current chunk's positions. Every
//! token carries a role embedding and a timestep embedding of its own σ
//! (0 for clean tokens).
//!
//! [`Bound`] is a parameter set placed on a [`Tape`]. Whether a tensor is
//! trainable is decided at binding time, so the same forward code serves
//! base pretraining, adapter training and frozen rollouts.

mod cache;
mod lora;
mod params;

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cache::{KVCache, TokenRole};
pub use lora::{lora_targets, LoraSet};
pub use params::{ParamSet, Tensor};

use crate::diffnum::{RopeTable, Tape, Var};
use crate::error::{Error, Result};
use crate::frames::Frames;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub frame_dim: usize,
    pub chunk_frames: usize,
    pub cond_dim: usize,
    pub rope_base: f64,
    pub max_frames: usize,
    pub time_freqs: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            width: 32,
            mlp_hidden: 64,
            frame_dim: 8,
            chunk_frames: 3,
            cond_dim: 11,
            rope_base: 10_000.0,
            max_frames: 24,
            time_freqs: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.frame_dim == 0 || self.chunk_frames == 0 {
            return Err(Error::Config("denoiser extents must be positive".into()));
        }
        if self.width % self.heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "width {} must split into {} heads of even size",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Random initialization; the output projection starts small.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let (w, d, h) = (self.width, self.frame_dim, self.mlp_hidden);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamSet::default();
        p.insert("in.w", Tensor::randn(&[d, w], inv(d), rng));
        p.insert("in.b", Tensor::zeros(&[1, w]));
        p.insert("time.w", Tensor::randn(&[2 * self.time_freqs, w], inv(2 * self.time_freqs), rng));
        p.insert("time.b", Tensor::zeros(&[1, w]));
        p.insert("role.emb", Tensor::randn(&[TokenRole::COUNT, w], 0.5, rng));
        p.insert("cond.w", Tensor::randn(&[self.cond_dim, 2 * w], inv(self.cond_dim), rng));
        p.insert("cond.b", Tensor::zeros(&[1, 2 * w]));
        for l in 0..self.layers {
            p.insert(format!("l{l}.norm1"), Tensor::filled(&[1, w], 1.0));
            for name in ["wq", "wk", "wv"] {
                p.insert(format!("l{l}.{name}"), Tensor::randn(&[w, w], inv(w), rng));
            }
            p.insert(format!("l{l}.wo"), Tensor::randn(&[w, w], 0.5 * inv(w), rng));
            p.insert(format!("l{l}.norm2"), Tensor::filled(&[1, w], 1.0));
            p.insert(format!("l{l}.up"), Tensor::randn(&[w, h], inv(w), rng));
            p.insert(format!("l{l}.up_b"), Tensor::zeros(&[1, h]));
            p.insert(format!("l{l}.down"), Tensor::randn(&[h, w], 0.5 * inv(h), rng));
            p.insert(format!("l{l}.down_b"), Tensor::zeros(&[1, w]));
        }
        p.insert("out.norm", Tensor::filled(&[1, w], 1.0));
        p.insert("out.w", Tensor::randn(&[w, d], 0.1 * inv(w), rng));
        p.insert("out.b", Tensor::zeros(&[1, d]));
        // Linear path from the noisy input straight to the output.
        p.insert("out.skip", Tensor::zeros(&[d, d]));
        Ok(p)
    }

    /// Zero output head replacing `out.w`, `out.b` and `out.skip`.
    pub fn zero_head(&self) -> ParamSet {
        let mut p = ParamSet::default();
        p.insert("w", Tensor::zeros(&[self.width, self.frame_dim]));
        p.insert("b", Tensor::zeros(&[1, self.frame_dim]));
        p.insert("skip", Tensor::zeros(&[self.frame_dim, self.frame_dim]));
        p
    }
}

/// What to place on the tape and which parts are trainable.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub base: &'a ParamSet,
    pub base_trainable: bool,
    pub lora: Option<(&'a LoraSet, bool)>,
    pub head: Option<(&'a ParamSet, bool)>,
}

impl<'a> Binding<'a> {
    pub fn frozen(base: &'a ParamSet) -> Self {
        Self {
            base,
            base_trainable: false,
            lora: None,
            head: None,
        }
    }
}

struct BoundLayer {
    norm1: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    norm2: Var,
    up: Var,
    up_b: Var,
    down: Var,
    down_b: Var,
}

/// Parameters placed on one tape.
pub struct Bound {
    cfg: DenoiserConfig,
    in_w: Var,
    in_b: Var,
    time_w: Var,
    time_b: Var,
    role_emb: Var,
    cond_w: Var,
    cond_b: Var,
    layers: Vec<BoundLayer>,
    out_norm: Var,
    out_w: Var,
    out_b: Var,
    out_skip: Var,
    /// Trainable leaves as `namespace.name`.
    pub trainable: Vec<(String, Var)>,
}

/// A block of tokens in an uncached grouped forward.
pub struct Group {
    pub x: Var,
    pub sigma: f64,
    pub role: TokenRole,
    pub start: i64,
    /// Indices of other groups this group attends to.
    pub sees: Vec<usize>,
}

/// Sinusoidal features of `1000·σ`.
pub fn time_features(sigma: f64, freqs: usize) -> Vec<f64> {
    let t = 1000.0 * sigma;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let f = (-(10_000f64).ln() * k as f64 / freqs as f64).exp();
        out.push((t * f).sin());
    }
    for k in 0..freqs {
        let f = (-(10_000f64).ln() * k as f64 / freqs as f64).exp();
        out.push((t * f).cos());
    }
    out
}

fn leaf(tape: &mut Tape, tr: &mut Vec<(String, Var)>, t: &Tensor, train: bool, name: String) -> Result<Var> {
    if train {
        let v = tape.param(t.data.clone(), &t.shape)?;
        tr.push((name, v));
        Ok(v)
    } else {
        Ok(tape.constant(t.data.clone(), &t.shape)?)
    }
}

fn positions(start: i64, n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| start + i).collect()
}

impl Bound {
    pub fn bind(tape: &mut Tape, cfg: &DenoiserConfig, b: Binding<'_>) -> Result<Bound> {
        cfg.validate()?;
        if let Some((lora, _)) = b.lora {
            lora.check(b.base)?;
        }
        let mut trainable = Vec::new();
        let bt = b.base_trainable;
        let base = |tape: &mut Tape, tr: &mut Vec<(String, Var)>, name: &str| -> Result<Var> {
            leaf(tape, tr, b.base.get(name)?, bt, format!("base.{name}"))
        };
        let tr = &mut trainable;
        let in_w = base(tape, tr, "in.w")?;
        let in_b = base(tape, tr, "in.b")?;
        let time_w = base(tape, tr, "time.w")?;
        let time_b = base(tape, tr, "time.b")?;
        let role_emb = base(tape, tr, "role.emb")?;
        let cond_w = base(tape, tr, "cond.w")?;
        let cond_b = base(tape, tr, "cond.b")?;
        let out_norm = base(tape, tr, "out.norm")?;
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let adapted = |tape: &mut Tape, tr: &mut Vec<(String, Var)>, name: &str| -> Result<Var> {
                let target = format!("l{l}.{name}");
                let w = base(tape, tr, &target)?;
                let Some((lora, train)) = b.lora else { return Ok(w) };
                let Some((ta, tb)) = lora.pair(&target) else { return Ok(w) };
                let a = leaf(tape, tr, ta, train, format!("lora.{target}.a"))?;
                let bb = leaf(tape, tr, tb, train, format!("lora.{target}.b"))?;
                let ab = tape.matmul(a, bb)?;
                let ab = tape.scale(ab, lora.scale())?;
                Ok(tape.add(w, ab)?)
            };
            layers.push(BoundLayer {
                norm1: base(tape, tr, &format!("l{l}.norm1"))?,
                wq: adapted(tape, tr, "wq")?,
                wk: adapted(tape, tr, "wk")?,
                wv: adapted(tape, tr, "wv")?,
                wo: adapted(tape, tr, "wo")?,
                norm2: base(tape, tr, &format!("l{l}.norm2"))?,
                up: adapted(tape, tr, "up")?,
                up_b: base(tape, tr, &format!("l{l}.up_b"))?,
                down: adapted(tape, tr, "down")?,
                down_b: base(tape, tr, &format!("l{l}.down_b"))?,
            });
        }
        let (out_w, out_b, out_skip) = match b.head {
            Some((head, train)) => (
                leaf(tape, tr, head.get("w")?, train, "head.w".into())?,
                leaf(tape, tr, head.get("b")?, train, "head.b".into())?,
                leaf(tape, tr, head.get("skip")?, train, "head.skip".into())?,
            ),
            None => (
                base(tape, tr, "out.w")?,
                base(tape, tr, "out.b")?,
                base(tape, tr, "out.skip")?,
            ),
        };
        Ok(Bound {
            cfg: cfg.clone(),
            in_w,
            in_b,
            time_w,
            time_b,
            role_emb,
            cond_w,
            cond_b,
            layers,
            out_norm,
            out_w,
            out_b,
            out_skip,
            trainable,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn role_rows(&self, tape: &mut Tape, roles: &[TokenRole]) -> Result<Var> {
        let mut oh = vec![0.0; roles.len() * TokenRole::COUNT];
        for (i, r) in roles.iter().enumerate() {
            oh[i * TokenRole::COUNT + r.index()] = 1.0;
        }
        let oh = tape.constant(oh, &[roles.len(), TokenRole::COUNT])?;
        Ok(tape.matmul(oh, self.role_emb)?)
    }

    /// Frame tokens: input projection plus timestep and role embeddings.
    pub fn embed(&self, tape: &mut Tape, x: Var, sigma: f64, role: TokenRole) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.frame_dim {
            return Err(Error::shape("denoiser.embed", &[0, self.cfg.frame_dim], &shape));
        }
        let n = shape[0];
        let h = tape.matmul(x, self.in_w)?;
        let h = tape.add_row(h, self.in_b)?;
        let feats = time_features(sigma, self.cfg.time_freqs);
        let f = tape.constant(feats.repeat(n), &[n, 2 * self.cfg.time_freqs])?;
        let te = tape.matmul(f, self.time_w)?;
        let te = tape.add_row(te, self.time_b)?;
        let h = tape.add(h, te)?;
        let re = self.role_rows(tape, &vec![role; n])?;
        Ok(tape.add(h, re)?)
    }

    /// The two condition tokens.
    pub fn embed_cond(&self, tape: &mut Tape, cond: &[f64]) -> Result<Var> {
        if cond.len() != self.cfg.cond_dim {
            return Err(Error::shape("denoiser.cond", &[self.cfg.cond_dim], &[cond.len()]));
        }
        let c = tape.constant(cond.to_vec(), &[1, cond.len()])?;
        let e = tape.matmul(c, self.cond_w)?;
        let e = tape.add_row(e, self.cond_b)?;
        let e = tape.reshape(e, &[2, self.cfg.width])?;
        let re = self.role_rows(tape, &[TokenRole::Cond, TokenRole::Cond])?;
        Ok(tape.add(e, re)?)
    }

    fn rope(&self, pos: &[i64]) -> Rc<RopeTable> {
        let p: Vec<f64> = pos.iter().map(|&x| x as f64).collect();
        Rc::new(RopeTable::new(&p, self.cfg.heads, self.cfg.head_dim(), self.cfg.rope_base))
    }

    /// One pre-norm block. Returns the new hidden state and this block's
    /// rotated keys and values for the input tokens.
    fn layer(
        &self,
        tape: &mut Tape,
        l: usize,
        h: Var,
        rope: &Rc<RopeTable>,
        ctx: Option<(Var, Var)>,
        allowed: &[bool],
    ) -> Result<(Var, Var, Var)> {
        let bl = &self.layers[l];
        let hd = self.cfg.head_dim();
        let x = tape.rms_norm(h, bl.norm1, NORM_EPS)?;
        let q = tape.matmul(x, bl.wq)?;
        let k = tape.matmul(x, bl.wk)?;
        let v = tape.matmul(x, bl.wv)?;
        let q = tape.rope(q, rope.clone())?;
        let k = tape.rope(k, rope.clone())?;
        let (keys, vals) = match ctx {
            Some((ck, cv)) => (tape.concat_rows(&[ck, k])?, tape.concat_rows(&[cv, v])?),
            None => (k, v),
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for hh in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, hh * hd, hd)?;
            let kh = tape.slice_cols(keys, hh * hd, hd)?;
            let vh = tape.slice_cols(vals, hh * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let p = tape.masked_softmax(s, allowed)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(o, bl.wo)?;
        let h = tape.add(h, o)?;
        let x = tape.rms_norm(h, bl.norm2, NORM_EPS)?;
        let u = tape.matmul(x, bl.up)?;
        let u = tape.add_row(u, bl.up_b)?;
        let u = tape.silu(u)?;
        let m = tape.matmul(u, bl.down)?;
        let m = tape.add_row(m, bl.down_b)?;
        Ok((tape.add(h, m)?, k, v))
    }

    fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let x = tape.rms_norm(h, self.out_norm, NORM_EPS)?;
        let o = tape.matmul(x, self.out_w)?;
        Ok(tape.add_row(o, self.out_b)?)
    }

    fn add_skip(&self, tape: &mut Tape, o: Var, x: Var) -> Result<Var> {
        let s = tape.matmul(x, self.out_skip)?;
        Ok(tape.add(o, s)?)
    }

    /// Runs embedded tokens against the cache; every new token sees the
    /// whole cache and all new tokens. Returns final hidden states and the
    /// per-layer keys/values of the new tokens.
    fn run_cached(
        &self,
        tape: &mut Tape,
        cache: &KVCache,
        h: Var,
        pos: &[i64],
    ) -> Result<(Var, Vec<(Vec<f64>, Vec<f64>)>)> {
        if cache.layers() != self.cfg.layers {
            return Err(Error::shape("kv_cache", &[self.cfg.layers], &[cache.layers()]));
        }
        let n = pos.len();
        let m = cache.len();
        let w = self.cfg.width;
        let rope = self.rope(pos);
        let allowed = vec![true; n * (m + n)];
        let mut h = h;
        let mut kv = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let ctx = if m > 0 {
                let ck = tape.constant(cache.keys(l).to_vec(), &[m, w])?;
                let cv = tape.constant(cache.values(l).to_vec(), &[m, w])?;
                Some((ck, cv))
            } else {
                None
            };
            let (nh, k, v) = self.layer(tape, l, h, &rope, ctx, &allowed)?;
            kv.push((tape.value(k).to_vec(), tape.value(v).to_vec()));
            h = nh;
        }
        Ok((h, kv))
    }

    /// Fresh cache holding the condition tokens.
    pub fn init_cache(&self, tape: &mut Tape, cond: &[f64]) -> Result<KVCache> {
        let mut cache = KVCache::new(self.cfg.layers, self.cfg.width);
        let e = self.embed_cond(tape, cond)?;
        let pos = [-2, -1];
        let (_, kv) = self.run_cached(tape, &cache, e, &pos)?;
        cache.push_block(kv, &pos, TokenRole::Cond)?;
        Ok(cache)
    }

    fn check_after_history(&self, cache: &KVCache, start: i64, n: usize) -> Result<()> {
        if start < 0 {
            return Err(Error::Invalid(format!("frame position {start} is reserved")));
        }
        if let Some(last) = cache.last_history_position() {
            if start <= last {
                return Err(Error::Invalid(format!(
                    "positions {start}.. overlap cached history ending at {last}"
                )));
            }
        }
        if (start as usize) + n > self.cfg.max_frames {
            return Err(Error::Invalid(format!("positions exceed max_frames {}", self.cfg.max_frames)));
        }
        Ok(())
    }

    /// Appends a finished clean chunk under the history role. Any reflect
    /// block is dropped first.
    pub fn append_history(&self, tape: &mut Tape, cache: &mut KVCache, chunk: &Frames, start: i64) -> Result<()> {
        let expected = cache.last_history_position().map_or(0, |p| p + 1);
        if start != expected {
            return Err(Error::Invalid(format!(
                "history must continue at position {expected}, got {start}"
            )));
        }
        self.check_after_history(cache, start, chunk.rows)?;
        cache.clear_reflect();
        let x = tape.constant(chunk.data.clone(), &[chunk.rows, chunk.dim])?;
        let e = self.embed(tape, x, 0.0, TokenRole::History)?;
        let pos = positions(start, chunk.rows);
        let (_, kv) = self.run_cached(tape, cache, e, &pos)?;
        cache.push_block(kv, &pos, TokenRole::History)
    }

    /// Replaces the reflect block with `chunk` at the given positions.
    pub fn set_reflect(&self, tape: &mut Tape, cache: &mut KVCache, chunk: &Frames, start: i64) -> Result<()> {
        self.check_after_history(cache, start, chunk.rows)?;
        cache.clear_reflect();
        let x = tape.constant(chunk.data.clone(), &[chunk.rows, chunk.dim])?;
        let e = self.embed(tape, x, 0.0, TokenRole::Reflect)?;
        let pos = positions(start, chunk.rows);
        let (_, kv) = self.run_cached(tape, cache, e, &pos)?;
        cache.push_block(kv, &pos, TokenRole::Reflect)
    }

    /// Output-head prediction for a noisy chunk (velocity for the base
    /// head, noise residual for a refiner head).
    pub fn forward_chunk(&self, tape: &mut Tape, cache: &KVCache, x: Var, sigma: f64, start: i64) -> Result<Var> {
        let n = tape.shape(x)[0];
        self.check_after_history(cache, start, n)?;
        let e = self.embed(tape, x, sigma, TokenRole::Noisy)?;
        let (h, _) = self.run_cached(tape, cache, e, &positions(start, n))?;
        let o = self.head(tape, h)?;
        self.add_skip(tape, o, x)
    }

    /// Uncached forward over `[cond | groups...]` with a group-level mask.
    /// Returns the head output of every group.
    pub fn forward_grouped(&self, tape: &mut Tape, cond: &[f64], groups: &[Group]) -> Result<Vec<Var>> {
        let mut parts = vec![self.embed_cond(tape, cond)?];
        let mut owner = vec![usize::MAX, usize::MAX];
        let mut pos = vec![-2, -1];
        let mut sizes = Vec::with_capacity(groups.len());
        for (g, grp) in groups.iter().enumerate() {
            let n = tape.shape(grp.x)[0];
            parts.push(self.embed(tape, grp.x, grp.sigma, grp.role)?);
            owner.extend(std::iter::repeat_n(g, n));
            pos.extend(positions(grp.start, n));
            sizes.push(n);
        }
        let total = owner.len();
        let mut allowed = vec![false; total * total];
        for i in 0..total {
            for j in 0..total {
                allowed[i * total + j] = match (owner[i], owner[j]) {
                    (_, usize::MAX) => true,
                    (usize::MAX, _) => false,
                    (gi, gj) => gi == gj || groups[gi].sees.contains(&gj),
                };
            }
        }
        let mut h = tape.concat_rows(&parts)?;
        let rope = self.rope(&pos);
        for l in 0..self.cfg.layers {
            h = self.layer(tape, l, h, &rope, None, &allowed)?.0;
        }
        let out = self.head(tape, h)?;
        let mut res = Vec::with_capacity(groups.len());
        let mut at = 2;
        for (n, grp) in sizes.into_iter().zip(groups) {
            let o = tape.slice_rows(out, at, n)?;
            res.push(self.add_skip(tape, o, grp.x)?);
            at += n;
        }
        Ok(res)
    }
}

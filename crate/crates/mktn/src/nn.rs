//! Named parameters and the small neural blocks the model is assembled
//! from: affine maps, multi-head attention, and a two-layer feed-forward.
//!
//! Every parameter lives in a [`ParamStore`] under a dotted path and is
//! initialized from its own named RNG stream, so adding or removing a
//! module never shifts another module's initial weights.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.entries.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    /// Glorot-uniform weight matrix drawn from the stream `init/<name>`.
    pub fn add_xavier(&mut self, seed: u64, name: &str, rows: usize, cols: usize) {
        let mut rng = stream_rng(seed, &format!("init/{name}"));
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.insert(name, v);
    }

    /// Small gaussian init for learnable query banks.
    pub fn add_gaussian(&mut self, seed: u64, name: &str, rows: usize, cols: usize, std: f64) {
        let mut rng = stream_rng(seed, &format!("init/{name}"));
        let v = Array2::from_shape_fn((rows, cols), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        });
        self.insert(name, v);
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn add_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Array2::from_elem((1, 1), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.entries.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Put every parameter on a tape as a leaf, in name order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let out: BTreeMap<&String, SavedParam> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k,
                    SavedParam {
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_value(out)?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let raw: BTreeMap<String, SavedParam> = serde_json::from_value(value)?;
        let mut store = ParamStore::new();
        for (k, p) in raw {
            let v = Array2::from_shape_vec((p.rows, p.cols), p.data)
                .map_err(|e| Error::ShapeMismatch(format!("{k}: {e}")))?;
            store.entries.insert(k, v);
        }
        Ok(store)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json_value()?)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        Self::from_json_value(serde_json::from_str(&text)?)
    }
}

/// Tape handles for every parameter of a store.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, d_in: usize, d_out: usize) {
        store.add_xavier(seed, &format!("{prefix}.w"), d_in, d_out);
        store.add_zeros(&format!("{prefix}.b"), 1, d_out);
    }

    pub fn bind(b: &Bound, prefix: &str) -> Self {
        Affine { w: b.var(&format!("{prefix}.w")), b: b.var(&format!("{prefix}.b")) }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let m = tape.matmul(x, self.w);
        tape.add_row_broadcast(m, self.b)
    }
}

/// Multi-head attention. Queries attend keys/values; an optional additive
/// mask (0 / -inf, shared across heads) restricts which keys each query
/// may see. `scaled` applies the usual 1/sqrt(head_dim) on the logits.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
    pub heads: usize,
    pub scaled: bool,
}

impl MultiHeadAttention {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
        for part in ["wq", "wk", "wv", "wo"] {
            store.add_xavier(seed, &format!("{prefix}.{part}"), d, d);
        }
        for part in ["bq", "bk", "bv", "bo"] {
            store.add_zeros(&format!("{prefix}.{part}"), 1, d);
        }
    }

    pub fn bind(b: &Bound, prefix: &str, heads: usize, scaled: bool) -> Self {
        MultiHeadAttention {
            wq: b.var(&format!("{prefix}.wq")),
            wk: b.var(&format!("{prefix}.wk")),
            wv: b.var(&format!("{prefix}.wv")),
            wo: b.var(&format!("{prefix}.wo")),
            bq: b.var(&format!("{prefix}.bq")),
            bk: b.var(&format!("{prefix}.bk")),
            bv: b.var(&format!("{prefix}.bv")),
            bo: b.var(&format!("{prefix}.bo")),
            heads,
            scaled,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys_values: Var,
        mask: Option<&Array2<f64>>,
    ) -> Var {
        let d = tape.value(self.wq).ncols();
        assert_eq!(d % self.heads, 0, "heads must divide d");
        let hd = d / self.heads;

        let q = tape.matmul(queries, self.wq);
        let q = tape.add_row_broadcast(q, self.bq);
        let k = tape.matmul(keys_values, self.wk);
        let k = tape.add_row_broadcast(k, self.bk);
        let v = tape.matmul(keys_values, self.wv);
        let v = tape.add_row_broadcast(v, self.bv);

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
            let kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
            let vh = tape.slice_cols(v, h * hd, (h + 1) * hd);
            let kt = tape.transpose(kh);
            let mut logits = tape.matmul(qh, kt);
            if self.scaled {
                logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
            }
            let a = tape.softmax_rows(logits, mask.cloned());
            head_outs.push(tape.matmul(a, vh));
        }
        let o = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs) };
        let o = tape.matmul(o, self.wo);
        tape.add_row_broadcast(o, self.bo)
    }
}

/// Two-layer feed-forward, `relu(x W1 + b1) W2 + b2`, both layers width d.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Affine,
    pub l2: Affine,
}

impl FeedForward {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
        Affine::register(store, seed, &format!("{prefix}.l1"), d, d);
        Affine::register(store, seed, &format!("{prefix}.l2"), d, d);
    }

    pub fn bind(b: &Bound, prefix: &str) -> Self {
        FeedForward { l1: Affine::bind(b, &format!("{prefix}.l1")), l2: Affine::bind(b, &format!("{prefix}.l2")) }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.l1.apply(tape, x);
        let h = tape.relu(h);
        self.l2.apply(tape, h)
    }
}

/// Self-attention + feed-forward with averaged residuals:
/// `h = (x + attn(x)) / 2; y = (h + ffn(h)) / 2`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn register(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
        MultiHeadAttention::register(store, seed, &format!("{prefix}.attn"), d);
        FeedForward::register(store, seed, &format!("{prefix}.ffn"), d);
    }

    pub fn bind(b: &Bound, prefix: &str, heads: usize) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::bind(b, &format!("{prefix}.attn"), heads, true),
            ffn: FeedForward::bind(b, &format!("{prefix}.ffn")),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let a = self.attn.apply(tape, x, x, None);
        let s = tape.add(x, a);
        let h = tape.scale(s, 0.5);
        let f = self.ffn.apply(tape, h);
        let s2 = tape.add(h, f);
        tape.scale(s2, 0.5)
    }
}

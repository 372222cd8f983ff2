//! Neural building blocks: linear layers, multi-head attention with
//! pluggable additive masks, feed-forward blocks, and the same-view /
//! different-view mask constructors.

use std::io::Write;

use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Elem, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    Sva,
    Dva,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Full => "full",
            MaskKind::Sva => "sva",
            MaskKind::Dva => "dva",
        }
    }
}

/// Additive token-by-token attention mask over `views * tokens_per_view`
/// tokens. Entries are 0 (unmasked) or the dtype's mask constant.
#[derive(Debug, Clone)]
pub struct AttentionMask<T: Elem> {
    pub kind: MaskKind,
    pub views: usize,
    pub tokens_per_view: usize,
    pub matrix: Tensor<T>,
}

/// Builds the mask of the given kind: FULL leaves everything unmasked,
/// SVA unmasks (q, k) iff they share a view, DVA iff they do not.
pub fn build_attention_mask<T: Elem>(
    kind: MaskKind,
    views: usize,
    tokens_per_view: usize,
) -> AttentionMask<T> {
    assert!(views >= 1 && tokens_per_view >= 1);
    let n = views * tokens_per_view;
    let masked = T::mask_value();
    let mut data = vec![T::zero(); n * n];
    for q in 0..n {
        let qv = q / tokens_per_view;
        for k in 0..n {
            let kv = k / tokens_per_view;
            let unmasked = match kind {
                MaskKind::Full => true,
                MaskKind::Sva => qv == kv,
                MaskKind::Dva => qv != kv,
            };
            if !unmasked {
                data[q * n + k] = masked;
            }
        }
    }
    AttentionMask {
        kind,
        views,
        tokens_per_view,
        matrix: Tensor::new(vec![n, n], data).expect("square mask"),
    }
}

impl<T: Elem> AttentionMask<T> {
    pub fn tokens(&self) -> usize {
        self.views * self.tokens_per_view
    }

    pub fn is_unmasked(&self, q: usize, k: usize) -> bool {
        let n = self.tokens();
        self.matrix.data()[q * n + k] == T::zero()
    }

    pub fn unmasked_count(&self) -> usize {
        self.matrix.data().iter().filter(|&&v| v == T::zero()).count()
    }

    /// Query rows with no unmasked key (e.g. every DVA row when M = 1).
    pub fn all_masked_rows(&self) -> Vec<usize> {
        let n = self.tokens();
        (0..n)
            .filter(|&q| (0..n).all(|k| !self.is_unmasked(q, k)))
            .collect()
    }
}

/// `x [rows, in] . weight [in, out] + bias [out]`.
pub fn linear<T: Elem>(x: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    x.matmul(weight)?.add_row(bias)
}

/// Tape-bound attention parameters: full-width q/k/v projections (each
/// head uses its own column block) and a shared output projection.
pub struct AttnVars<T: Elem> {
    pub q_w: Var<T>,
    pub q_b: Var<T>,
    pub k_w: Var<T>,
    pub k_b: Var<T>,
    pub v_w: Var<T>,
    pub v_b: Var<T>,
    pub out_w: Var<T>,
    pub out_b: Var<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Elem> AttnVars<T> {
    /// Looks up `<prefix>.{q,k,v,out}.{weight,bias}` in a bound store.
    pub fn from_bound(bound: &Bound<T>, prefix: &str, heads: usize) -> Result<Self> {
        let g = |suffix: &str| bound.get(&format!("{prefix}.{suffix}")).cloned();
        let q_w = g("q.weight")?;
        let c = q_w.shape()[0];
        if c % heads != 0 {
            return Err(Error::Config(format!(
                "channel width {c} not divisible by {heads} heads"
            )));
        }
        Ok(AttnVars {
            head_dim: c / heads,
            q_w,
            q_b: g("q.bias")?,
            k_w: g("k.weight")?,
            k_b: g("k.bias")?,
            v_w: g("v.weight")?,
            v_b: g("v.bias")?,
            out_w: g("out.weight")?,
            out_b: g("out.bias")?,
            heads,
        })
    }
}

/// Post-softmax attention weights captured for inspection.
#[derive(Debug, Clone)]
pub struct AttentionRecord<T: Elem> {
    pub layer: usize,
    pub head: usize,
    pub kind: MaskKind,
    /// `[tokens, tokens]`, rows summing to 1 over unmasked columns
    /// (all-masked rows are zero).
    pub weights: Tensor<T>,
    pub views: usize,
    pub tokens_per_view: usize,
}

pub struct AttentionOutput<T: Elem> {
    pub out: Var<T>,
    /// Per-head post-softmax weights, present when recording was requested.
    pub head_weights: Option<Vec<Tensor<T>>>,
    /// Query rows whose keys were all masked; their output rows are zero.
    pub all_masked_rows: Vec<usize>,
}

/// Scaled dot-product multi-head attention with an optional additive mask
/// shared across heads. All-masked query rows produce exactly-zero output
/// rows (no bias leak) and are reported to the caller.
pub fn multi_head_attention<T: Elem>(
    query_input: &Var<T>,
    kv_input: &Var<T>,
    mask: Option<&AttentionMask<T>>,
    params: &AttnVars<T>,
    record: bool,
) -> Result<AttentionOutput<T>> {
    let n = query_input.shape()[0];
    if let Some(m) = mask {
        if m.tokens() != n {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: query_input.shape().to_vec(),
                rhs: m.matrix.shape().to_vec(),
            });
        }
    }
    let q = linear(query_input, &params.q_w, &params.q_b)?;
    let k = linear(kv_input, &params.k_w, &params.k_b)?;
    let v = linear(kv_input, &params.v_w, &params.v_b)?;

    let hd = params.head_dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut head_outs = Vec::with_capacity(params.heads);
    let mut head_weights = record.then(Vec::new);
    let mut all_masked_rows = Vec::new();
    for h in 0..params.heads {
        let qh = q.slice(1, h * hd, hd)?;
        let kh = k.slice(1, h * hd, hd)?;
        let vh = v.slice(1, h * hd, hd)?;
        let scores = qh.matmul(&kh.transpose_last2()?)?.scale(scale);
        let sm = scores.masked_softmax_lastdim(mask.map(|m| &m.matrix))?;
        if h == 0 {
            all_masked_rows = sm.all_masked_rows;
        }
        if let Some(w) = head_weights.as_mut() {
            w.push(sm.out.value());
        }
        head_outs.push(sm.out.matmul(&vh)?);
    }
    let refs: Vec<&Var<T>> = head_outs.iter().collect();
    let concat = query_input.tape().concat(&refs, 1)?;
    let mut out = linear(&concat, &params.out_w, &params.out_b)?;
    if !all_masked_rows.is_empty() {
        // zero the flagged rows so the output bias does not leak into them
        let c = out.shape()[1];
        let mut keep = Tensor::full(vec![n, c], T::one());
        for &r in &all_masked_rows {
            keep.data_mut()[r * c..(r + 1) * c].fill(T::zero());
        }
        out = out.mul(&out.tape().leaf(&keep))?;
    }
    Ok(AttentionOutput {
        out,
        head_weights,
        all_masked_rows,
    })
}

/// Two-layer position-wise feed-forward block: linear, gelu, linear.
pub fn ffn<T: Elem>(
    x: &Var<T>,
    fc1_w: &Var<T>,
    fc1_b: &Var<T>,
    fc2_w: &Var<T>,
    fc2_b: &Var<T>,
) -> Result<Var<T>> {
    let h = linear(x, fc1_w, fc1_b)?.gelu();
    linear(&h, fc2_w, fc2_b)
}

/// (rows, cols) of the spatial grid a view's token block came from:
/// perfect squares map back to their grid, anything else is a single row.
pub fn token_grid(tokens_per_view: usize) -> (usize, usize) {
    let s = (tokens_per_view as f64).sqrt().round() as usize;
    if s * s == tokens_per_view {
        (s, s)
    } else {
        (1, tokens_per_view)
    }
}

/// Writes attention records as CSV, one row per nonzero weight:
/// `layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight`.
pub fn write_attention_csv<T: Elem, W: Write>(
    w: &mut W,
    records: &[AttentionRecord<T>],
) -> Result<()> {
    let err = |e| Error::io("<attention csv>", e);
    writeln!(w, "layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight").map_err(err)?;
    for rec in records {
        let t = rec.tokens_per_view;
        let (_, cols) = token_grid(t);
        let n = rec.views * t;
        let data = rec.weights.data();
        for q in 0..n {
            for k in 0..n {
                let weight = data[q * n + k].to_f64();
                if weight == 0.0 {
                    continue;
                }
                let (qv, qt) = (q / t, q % t);
                let (kv, kt) = (k / t, k % t);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{:.9}",
                    rec.layer,
                    rec.head,
                    rec.kind.as_str(),
                    qv,
                    qt / cols,
                    qt % cols,
                    kv,
                    kt / cols,
                    kt % cols,
                    weight
                )
                .map_err(err)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sva_mask_m2_t1() {
        let m = build_attention_mask::<f64>(MaskKind::Sva, 2, 1);
        let x = f64::mask_value();
        assert_eq!(m.matrix.data(), &[0.0, x, x, 0.0]);
    }

    #[test]
    fn dva_mask_m2_t1_is_complement() {
        let m = build_attention_mask::<f64>(MaskKind::Dva, 2, 1);
        let x = f64::mask_value();
        assert_eq!(m.matrix.data(), &[x, 0.0, 0.0, x]);
    }

    #[test]
    fn mask_counts_m4_t49() {
        let sva = build_attention_mask::<f32>(MaskKind::Sva, 4, 49);
        let dva = build_attention_mask::<f32>(MaskKind::Dva, 4, 49);
        assert_eq!(sva.unmasked_count(), 9604);
        assert_eq!(dva.unmasked_count(), 28812);
        assert_eq!(sva.unmasked_count() + dva.unmasked_count(), 196 * 196);
    }

    #[test]
    fn dva_m1_rows_all_masked() {
        let dva = build_attention_mask::<f32>(MaskKind::Dva, 1, 3);
        assert_eq!(dva.all_masked_rows(), vec![0, 1, 2]);
        let sva = build_attention_mask::<f32>(MaskKind::Sva, 1, 3);
        assert!(sva.all_masked_rows().is_empty());
        assert_eq!(sva.unmasked_count(), 9);
    }

    #[test]
    fn token_grid_shapes() {
        assert_eq!(token_grid(49), (7, 7));
        assert_eq!(token_grid(1), (1, 1));
        assert_eq!(token_grid(6), (1, 6));
    }
}

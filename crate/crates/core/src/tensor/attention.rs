//! Sparse-masked multi-head attention kernels.
//!
//! The mask is stored row-compressed: query `i` may attend exactly the key
//! indices in `indices[offsets[i]..offsets[i + 1]]`. Masked pairs never enter
//! the softmax, which is the same as a `-inf` logit. A query with no admissible
//! key produces a zero output row.

use super::array::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    n_queries: usize,
    n_keys: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl SparseMask {
    /// Builds the mask by evaluating `allowed(query, key)` on every pair.
    pub fn from_fn(n_queries: usize, n_keys: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut offsets = Vec::with_capacity(n_queries + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for q in 0..n_queries {
            for k in 0..n_keys {
                if allowed(q, k) {
                    indices.push(k);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            n_queries,
            n_keys,
            offsets,
            indices,
        }
    }

    /// Builds the mask from explicit per-query key lists.
    pub fn from_lists(n_keys: usize, lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            debug_assert!(l.iter().all(|&k| k < n_keys));
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self {
            n_queries: lists.len(),
            n_keys,
            offsets,
            indices,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn keys_of(&self, q: usize) -> &[usize] {
        &self.indices[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.keys_of(q).contains(&k)
    }

    /// Dense boolean view, row-major `[n_queries, n_keys]`.
    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.n_queries * self.n_keys];
        for q in 0..self.n_queries {
            for &k in self.keys_of(q) {
                out[q * self.n_keys + k] = true;
            }
        }
        out
    }
}

pub(crate) struct AttnShape {
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub scale: f64,
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Returns `(output [nq, heads*dv], probs [heads * nnz])`.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &SparseMask,
    s: &AttnShape,
) -> (Vec<T>, Vec<T>) {
    let (h_n, dk, dv) = (s.heads, s.dk, s.dv);
    let qw = h_n * dk;
    let vw = h_n * dv;
    let scale = T::lit(s.scale);
    let nnz = mask.nnz();
    let mut out = vec![T::zero(); mask.n_queries * vw];
    let mut probs = vec![T::zero(); h_n * nnz];
    for h in 0..h_n {
        let pbase = h * nnz;
        for i in 0..mask.n_queries {
            let (lo, hi) = (mask.offsets[i], mask.offsets[i + 1]);
            if lo == hi {
                continue;
            }
            let qi = &q[i * qw + h * dk..i * qw + (h + 1) * dk];
            let mut mx = T::neg_infinity();
            for e in lo..hi {
                let j = mask.indices[e];
                let kj = &k[j * qw + h * dk..j * qw + (h + 1) * dk];
                let logit = dot(qi, kj) * scale;
                probs[pbase + e] = logit;
                if logit > mx {
                    mx = logit;
                }
            }
            let mut z = T::zero();
            for e in lo..hi {
                let p = (probs[pbase + e] - mx).exp();
                probs[pbase + e] = p;
                z = z + p;
            }
            let inv = T::one() / z;
            let oi = &mut out[i * vw + h * dv..i * vw + (h + 1) * dv];
            for e in lo..hi {
                let p = probs[pbase + e] * inv;
                probs[pbase + e] = p;
                let j = mask.indices[e];
                let vj = &v[j * vw + h * dv..j * vw + (h + 1) * dv];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o = *o + p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    mask: &SparseMask,
    s: &AttnShape,
    dq: &mut [T],
    dk_acc: &mut [T],
    dv_acc: &mut [T],
) {
    let (h_n, dk, dv) = (s.heads, s.dk, s.dv);
    let qw = h_n * dk;
    let vw = h_n * dv;
    let scale = T::lit(s.scale);
    let nnz = mask.nnz();
    let mut dp = Vec::new();
    for h in 0..h_n {
        let pbase = h * nnz;
        for i in 0..mask.n_queries {
            let (lo, hi) = (mask.offsets[i], mask.offsets[i + 1]);
            if lo == hi {
                continue;
            }
            let doi = &d_out[i * vw + h * dv..i * vw + (h + 1) * dv];
            dp.clear();
            let mut weighted = T::zero();
            for e in lo..hi {
                let j = mask.indices[e];
                let vj = &v[j * vw + h * dv..j * vw + (h + 1) * dv];
                let g = dot(doi, vj);
                dp.push(g);
                weighted = weighted + probs[pbase + e] * g;
            }
            let qi_off = i * qw + h * dk;
            for (n, e) in (lo..hi).enumerate() {
                let j = mask.indices[e];
                let p = probs[pbase + e];
                let ds = p * (dp[n] - weighted) * scale;
                let kj_off = j * qw + h * dk;
                for c in 0..dk {
                    dq[qi_off + c] = dq[qi_off + c] + ds * k[kj_off + c];
                    dk_acc[kj_off + c] = dk_acc[kj_off + c] + ds * q[qi_off + c];
                }
                let vj_off = j * vw + h * dv;
                for c in 0..dv {
                    dv_acc[vj_off + c] = dv_acc[vj_off + c] + p * doi[c];
                }
            }
        }
    }
}

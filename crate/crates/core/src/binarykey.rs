//! Binary-key voice representations.
//!
//! A KBM is the concatenation of `A` MAP-adapted copies of a `C`-component
//! UBM. Every frame activates its `M` most likely KBM components; the per-frame
//! activations are averaged over the sample and the `K` most frequently
//! activated positions become the set bits of the binary key.
//!
//! Ties are always broken towards the lowest position so that the plaintext
//! path and the secure circuit agree bit for bit.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::format::{id_hash, BitmapStore, BKDB_MAGIC};
use crate::gmm::Gmm;

pub const DEFAULT_RELEVANCE: f64 = 16.0;

/// Mean-only MAP adaptation of `ubm` towards `frames` (T×F).
pub fn map_adapt(ubm: &Gmm, frames: &DMatrix<f64>, relevance: f64) -> Result<Gmm> {
    let (c, f) = (ubm.n_components(), ubm.dim());
    if frames.ncols() != f {
        return Err(Error::dim(f, frames.ncols(), "frame feature dimension"));
    }
    if frames.nrows() == 0 {
        return Err(Error::DegenerateInput("MAP adaptation needs at least one frame".into()));
    }
    if !(relevance > 0.0) {
        return Err(Error::Config("relevance factor must be positive".into()));
    }
    let mut occupancy = vec![0.0f64; c];
    let mut first_order = DMatrix::<f64>::zeros(c, f);
    let mut x = vec![0.0; f];
    for t in 0..frames.nrows() {
        for j in 0..f {
            x[j] = frames[(t, j)];
        }
        for (ci, g) in ubm.responsibilities(&x).into_iter().enumerate() {
            occupancy[ci] += g;
            for j in 0..f {
                first_order[(ci, j)] += g * x[j];
            }
        }
    }
    let means = DMatrix::from_fn(c, f, |ci, j| {
        let num: f64 = first_order[(ci, j)] + relevance * ubm.means()[(ci, j)];
        num / (occupancy[ci] + relevance)
    });
    ubm.with_means(means)
}

/// Binary-key background model.
#[derive(Clone, Debug, PartialEq)]
pub struct Kbm {
    anchors: usize,
    ubm_components: usize,
    feat_dim: usize,
    /// N×F row-major.
    means: Vec<f64>,
    variances: Vec<f64>,
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl Kbm {
    /// Assembles a KBM from anchor-major component parameters.
    pub fn from_components(
        anchors: usize,
        ubm_components: usize,
        means: &DMatrix<f64>,
        variances: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = anchors * ubm_components;
        if n == 0 {
            return Err(Error::Config("KBM needs at least one anchor and component".into()));
        }
        if means.nrows() != n || variances.nrows() != n {
            return Err(Error::dim(n, means.nrows(), "KBM component count"));
        }
        if means.ncols() != variances.ncols() {
            return Err(Error::dim(means.ncols(), variances.ncols(), "KBM feature dim"));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("KBM variances must be positive".into()));
        }
        let f = means.ncols();
        let mut m: Vec<f64> = Vec::with_capacity(n * f);
        let mut v: Vec<f64> = Vec::with_capacity(n * f);
        for i in 0..n {
            m.extend(means.row(i).iter());
            v.extend(variances.row(i).iter());
        }
        let inv_var = v.iter().map(|x| 1.0 / x).collect();
        let log_norm = (0..n)
            .map(|i| {
                -0.5 * (f as f64 * (2.0 * PI).ln() + v[i * f..(i + 1) * f].iter().map(|x| x.ln()).sum::<f64>())
            })
            .collect();
        Ok(Self {
            anchors,
            ubm_components,
            feat_dim: f,
            means: m,
            variances: v,
            inv_var,
            log_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors * self.ubm_components
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn ubm_components(&self) -> usize {
        self.ubm_components
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn anchor_of(&self, position: usize) -> usize {
        position / self.ubm_components
    }

    pub fn means(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.feat_dim, &self.means)
    }

    pub fn variances(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.feat_dim, &self.variances)
    }

    /// Unweighted diagonal-Gaussian log-density of `x` under component `i`.
    pub fn log_likelihood(&self, i: usize, x: &[f64]) -> f64 {
        let f = self.feat_dim;
        let mu = &self.means[i * f..(i + 1) * f];
        let iv = &self.inv_var[i * f..(i + 1) * f];
        let mut q = 0.0;
        for j in 0..f {
            let d = x[j] - mu[j];
            q += d * d * iv[j];
        }
        self.log_norm[i] - 0.5 * q
    }

    /// Reorders components: new position `p` holds old component `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::dim(self.len(), perm.len(), "permutation length"));
        }
        let means = self.means();
        let vars = self.variances();
        let pm = DMatrix::from_fn(self.len(), self.feat_dim, |p, j| means[(perm[p], j)]);
        let pv = DMatrix::from_fn(self.len(), self.feat_dim, |p, j| vars[(perm[p], j)]);
        Self::from_components(self.anchors, self.ubm_components, &pm, &pv)
    }
}

/// Concatenates `A` MAP-adapted UBM copies, anchor-major: anchor `a` occupies
/// positions `[a·C, (a+1)·C)`.
pub fn build_kbm(ubm: &Gmm, anchor_frames: &[DMatrix<f64>], relevance: f64) -> Result<Kbm> {
    if anchor_frames.is_empty() {
        return Err(Error::Config("KBM needs at least one anchor".into()));
    }
    let (c, f) = (ubm.n_components(), ubm.dim());
    let n = anchor_frames.len() * c;
    let mut means = DMatrix::zeros(n, f);
    let mut vars = DMatrix::zeros(n, f);
    for (a, frames) in anchor_frames.iter().enumerate() {
        let adapted = map_adapt(ubm, frames, relevance)?;
        means.rows_mut(a * c, c).copy_from(adapted.means());
        vars.rows_mut(a * c, c).copy_from(adapted.variances());
    }
    Kbm::from_components(anchor_frames.len(), c, &means, &vars)
}

/// Per-position activation frequencies pooled over a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCounts {
    pub counts: Vec<f64>,
    pub frames: usize,
    pub per_frame: usize,
}

fn desc_then_index(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest values, ties to the lowest index, in rank order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = desc_then_index(values);
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx.truncate(k);
    idx
}

/// Each frame adds `1/T` to the `m` KBM positions with the highest log-likelihood.
pub fn frame_activations(kbm: &Kbm, frames: &DMatrix<f64>, m: usize) -> Result<ActivationCounts> {
    let n = kbm.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!("per-frame selection {m} outside 1..={n}")));
    }
    if frames.ncols() != kbm.feat_dim {
        return Err(Error::dim(kbm.feat_dim, frames.ncols(), "frame feature dimension"));
    }
    let t = frames.nrows();
    if t == 0 {
        return Err(Error::DegenerateInput("no frames".into()));
    }
    let mut hits = vec![0u32; n];
    let mut ll = vec![0.0; n];
    let mut x = vec![0.0; kbm.feat_dim];
    for row in 0..t {
        for j in 0..kbm.feat_dim {
            x[j] = frames[(row, j)];
        }
        for (i, l) in ll.iter_mut().enumerate() {
            *l = kbm.log_likelihood(i, &x);
        }
        if m == 1 {
            let mut best = 0;
            for i in 1..n {
                if ll[i] > ll[best] {
                    best = i;
                }
            }
            hits[best] += 1;
        } else {
            for i in top_k_indices(&ll, m) {
                hits[i] += 1;
            }
        }
    }
    Ok(ActivationCounts {
        counts: hits.iter().map(|&h| h as f64 / t as f64).collect(),
        frames: t,
        per_frame: m,
    })
}

/// Fixed-length bit vector with exactly `k` set bits.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryKey {
    bits: BitVector,
    k: usize,
}

impl BinaryKey {
    pub fn from_bits(bits: BitVector) -> Self {
        let k = bits.count_ones();
        Self { bits, k }
    }

    pub fn bits(&self) -> &BitVector {
        &self.bits
    }

    pub fn into_bits(self) -> BitVector {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Sets the `k` positions with the highest pooled activation.
pub fn extract_bk(counts: &ActivationCounts, k: usize) -> Result<BinaryKey> {
    let n = counts.counts.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("key weight {k} outside 1..={n}")));
    }
    let mut bits = BitVector::zeros(n);
    for i in top_k_indices(&counts.counts, k) {
        bits.set(i, true);
    }
    Ok(BinaryKey { bits, k })
}

/// `popcount(a AND b)`
pub fn bk_similarity(a: &BinaryKey, b: &BinaryKey) -> Result<usize> {
    Ok(a.bits.and(&b.bits)?.count_ones())
}

/// Ids of the `n` cohort keys most similar to `sample`, ties to the lowest id.
pub fn top_n_by_similarity(sample: &BinaryKey, cohort: &[BinaryKey], ids: &[u64], n: usize) -> Result<Vec<u64>> {
    if ids.len() != cohort.len() {
        return Err(Error::dim(cohort.len(), ids.len(), "cohort ids"));
    }
    let mut scored = cohort
        .iter()
        .zip(ids)
        .map(|(c, &id)| Ok((bk_similarity(sample, c)?, id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by_key(|&(s, id)| (std::cmp::Reverse(s), id));
    Ok(scored.into_iter().take(n).map(|(_, id)| id).collect())
}

/// KBM plus the per-frame and per-sample selection sizes.
#[derive(Clone, Debug)]
pub struct BkExtractor {
    pub kbm: Kbm,
    pub per_frame: usize,
    pub k: usize,
}

impl BkExtractor {
    pub fn extract(&self, frames: &DMatrix<f64>) -> Result<BinaryKey> {
        extract_bk(&frame_activations(&self.kbm, frames, self.per_frame)?, self.k)
    }
}

pub fn write_bk_store<W: Write>(w: &mut W, n_bits: usize, k: usize, keys: &[(String, BinaryKey)]) -> Result<()> {
    let mut store = BitmapStore::new(BKDB_MAGIC, n_bits, k);
    for (id, key) in keys {
        if key.k() != k {
            return Err(Error::dim(k, key.k(), "binary key weight"));
        }
        store.push(id_hash(id), key.bits.clone())?;
    }
    store.write(w)
}

/// Reads a BK store; records are returned by sample-id hash.
pub fn read_bk_store<R: Read>(r: &mut R) -> Result<(usize, Vec<(u64, BinaryKey)>)> {
    let store = BitmapStore::read(r, BKDB_MAGIC)?;
    let k = store.k;
    let keys = store
        .records
        .into_iter()
        .map(|(tag, bits)| {
            let key = BinaryKey::from_bits(bits);
            if key.k() != k {
                return Err(Error::Format(format!("record has {} set bits, header says {k}", key.k())));
            }
            Ok((tag, key))
        })
        .collect::<Result<_>>()?;
    Ok((k, keys))
}

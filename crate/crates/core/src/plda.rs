//! Two-covariance PLDA.
//!
//! Speaker latent `y ~ N(μ, B)`, session `x = y + ε` with `ε ~ N(0, W)`. The
//! same-speaker LLR of two vectors is a quadratic form whose coefficients are
//! precomputed once per model into a [`ScoringForm`], the representation the
//! homomorphic layer consumes.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::Hash;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::Array;
use crate::linalg::{cholesky, is_symmetric, log_det, spd_inverse, symmetrize, SYMMETRY_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    mean: DVector<f64>,
    between: DMatrix<f64>,
    within: DMatrix<f64>,
}

impl PldaModel {
    pub fn new(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Config("PLDA dimension must be positive".into()));
        }
        for m in [&between, &within] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dim(d, m.nrows(), "PLDA covariance size"));
            }
        }
        cholesky(&between, "between-speaker covariance")?;
        cholesky(&within, "within-speaker covariance")?;
        Ok(Self { mean, between, within })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn between(&self) -> &DMatrix<f64> {
        &self.between
    }

    pub fn within(&self) -> &DMatrix<f64> {
        &self.within
    }
}

/// `llr(x1, x2) = x1ᵀQx1 + x2ᵀQx2 + 2·x1ᵀPx2 + cᵀ(x1 + x2) + k0`
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringForm {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub k0: f64,
}

impl ScoringForm {
    pub fn zeros(d: usize) -> Self {
        Self {
            q: DMatrix::zeros(d, d),
            p: DMatrix::zeros(d, d),
            c: DVector::zeros(d),
            k0: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Content hash; templates protected under one form refuse to score under another.
    pub fn id(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.q.iter().chain(self.p.iter()).chain(self.c.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update(self.k0.to_le_bytes());
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// `xᵀQx + cᵀx`, the part of the score that depends on one side only.
    pub fn self_term(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + self.c.dot(x)
    }
}

pub fn scoring_form(model: &PldaModel) -> Result<ScoringForm> {
    let b = &model.between;
    let t = symmetrize(&(b + &model.within));
    let (t_inv, ld_t) = spd_inverse(&t, "total covariance")?;
    let schur = symmetrize(&(&t - b * &t_inv * b));
    let (a, ld_schur) = spd_inverse(&schur, "same-speaker Schur complement")?;
    let g = -(&t_inv * b * &a);
    let q = symmetrize(&((&a - &t_inv) * -0.5));
    let p = symmetrize(&(g * -0.5));
    let qp = &q + &p;
    let mu = &model.mean;
    let c = &qp * mu * -2.0;
    let k0 = 0.5 * ld_t - 0.5 * ld_schur + 2.0 * mu.dot(&(&qp * mu));
    Ok(ScoringForm { q, p, c, k0 })
}

pub fn plda_score(form: &ScoringForm, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
    let d = form.dim();
    if x1.len() != d || x2.len() != d {
        return Err(Error::dim(d, x1.len().max(x2.len()), "PLDA input dimension"));
    }
    let quad = x1.dot(&(&form.q * x1)) + x2.dot(&(&form.q * x2));
    let cross = x1.dot(&(&form.p * x2)) + x2.dot(&(&form.p * x1));
    let lin = form.c.dot(&(x1 + x2));
    Ok(quad + cross + lin + form.k0)
}

fn gaussian_log_density(z: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(cov, "joint covariance")?;
    let sol = chol.solve(z);
    Ok(-0.5 * (z.len() as f64 * (2.0 * PI).ln() + log_det(&chol) + z.dot(&sol)))
}

/// Same- versus different-speaker LLR by direct evaluation of the 2D-dimensional
/// joint densities. Accepts any `between` for which the joint covariances are
/// nonsingular, including zero.
pub fn joint_llr(
    mean: &DVector<f64>,
    between: &DMatrix<f64>,
    within: &DMatrix<f64>,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
) -> Result<f64> {
    let d = mean.len();
    if x1.len() != d || x2.len() != d {
        return Err(Error::dim(d, x1.len().max(x2.len()), "PLDA input dimension"));
    }
    let t = between + within;
    let mut same = DMatrix::zeros(2 * d, 2 * d);
    let mut diff = DMatrix::zeros(2 * d, 2 * d);
    for (m, off) in [(&mut same, between), (&mut diff, &DMatrix::zeros(d, d))] {
        m.view_mut((0, 0), (d, d)).copy_from(&t);
        m.view_mut((d, d), (d, d)).copy_from(&t);
        m.view_mut((0, d), (d, d)).copy_from(off);
        m.view_mut((d, 0), (d, d)).copy_from(&off.transpose());
    }
    let mut z = DVector::zeros(2 * d);
    z.rows_mut(0, d).copy_from(&(x1 - mean));
    z.rows_mut(d, d).copy_from(&(x2 - mean));
    Ok(gaussian_log_density(&z, &symmetrize(&same))? - gaussian_log_density(&z, &symmetrize(&diff))?)
}

pub fn joint_llr_oracle(model: &PldaModel, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
    joint_llr(&model.mean, &model.between, &model.within, x1, x2)
}

/// `(x − mean) / ‖x − mean‖`
pub fn length_normalize(x: &DVector<f64>, mean: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != mean.len() {
        return Err(Error::dim(mean.len(), x.len(), "embedding dimension"));
    }
    let centered = x - mean;
    let norm = centered.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateInput("embedding equals the normalisation mean".into()));
    }
    Ok(centered / norm)
}

pub fn mean_of(xs: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::DegenerateInput("no embeddings".into()))?;
    let mut acc = DVector::zeros(first.len());
    for x in xs {
        if x.len() != first.len() {
            return Err(Error::dim(first.len(), x.len(), "embedding dimension"));
        }
        acc += x;
    }
    Ok(acc / xs.len() as f64)
}

/// Mean subtraction and length normalisation. Without `mean`, the mean of
/// `xs` itself is used.
pub fn preprocess(xs: &[DVector<f64>], mean: Option<&DVector<f64>>) -> Result<Vec<DVector<f64>>> {
    let owned;
    let mean = match mean {
        Some(m) => m,
        None => {
            owned = mean_of(xs)?;
            &owned
        }
    };
    xs.iter().map(|x| length_normalize(x, mean)).collect()
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood gain drops below this.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PldaFit {
    pub model: PldaModel,
    /// Log-likelihood of the parameters entering each iteration, then of the final ones.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of covariance updates that needed a ridge.
    pub regularized: usize,
    pub warnings: Vec<String>,
}

/// Symmetrises and, if Cholesky fails, adds `1e-6·trace/D·I` once.
fn ensure_spd(m: DMatrix<f64>, what: &'static str, count: &mut usize) -> Result<DMatrix<f64>> {
    let m = symmetrize(&m);
    if cholesky(&m, what).is_ok() {
        return Ok(m);
    }
    let d = m.nrows();
    let ridge = (1e-6 * m.trace() / d as f64).max(f64::MIN_POSITIVE.sqrt());
    let m = m + DMatrix::identity(d, d) * ridge;
    cholesky(&m, what)?;
    *count += 1;
    Ok(m)
}

struct Grouped {
    counts: Vec<usize>,
    sums: Vec<DVector<f64>>,
    /// `Σ x xᵀ` over every vector.
    second_moment: DMatrix<f64>,
    total: usize,
}

struct EStep {
    ll: f64,
    mean_sum: DVector<f64>,
    /// `Σ_i (C_i + m_i m_iᵀ)`
    between_acc: DMatrix<f64>,
    /// `Σ_i (n_i (C_i + m_i m_iᵀ) − m_i s_iᵀ − s_i m_iᵀ)`
    within_acc: DMatrix<f64>,
}

fn e_step(g: &Grouped, mu: &DVector<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<EStep> {
    let d = mu.len();
    let (b_inv, ld_b) = spd_inverse(b, "between-speaker covariance")?;
    let (w_inv, ld_w) = spd_inverse(w, "within-speaker covariance")?;
    let b_inv_mu = &b_inv * mu;
    let mut posterior: HashMap<usize, (DMatrix<f64>, f64)> = HashMap::new();
    let speakers = g.counts.len();
    let mut out = EStep {
        ll: 0.0,
        mean_sum: DVector::zeros(d),
        between_acc: DMatrix::zeros(d, d),
        within_acc: DMatrix::zeros(d, d),
    };
    for (&n, s) in g.counts.iter().zip(&g.sums) {
        if let std::collections::hash_map::Entry::Vacant(e) = posterior.entry(n) {
            let precision = symmetrize(&(&b_inv + &w_inv * n as f64));
            e.insert(spd_inverse(&precision, "latent posterior precision")?);
        }
        let (cov, ld_precision) = &posterior[&n];
        let eta = &b_inv_mu + &w_inv * s;
        let m = cov * &eta;
        out.ll += -0.5 * ld_precision + 0.5 * eta.dot(&m);
        let second = cov + &m * m.transpose();
        out.within_acc += &second * n as f64 - &m * s.transpose() - s * m.transpose();
        out.between_acc += second;
        out.mean_sum += m;
    }
    let nd = (g.total * d) as f64;
    out.ll += -0.5 * nd * (2.0 * PI).ln() - 0.5 * speakers as f64 * (ld_b + mu.dot(&b_inv_mu))
        - 0.5 * g.total as f64 * ld_w
        - 0.5 * w_inv.component_mul(&g.second_moment).sum();
    Ok(out)
}

/// EM estimation of `(μ, B, W)` from labelled embeddings.
pub fn fit_plda<L: Eq + Hash>(xs: &[DVector<f64>], labels: &[L], opts: &FitOptions) -> Result<PldaFit> {
    if xs.len() != labels.len() {
        return Err(Error::dim(xs.len(), labels.len(), "label count"));
    }
    let d = mean_of(xs)?.len();
    let mut index: HashMap<&L, usize> = HashMap::new();
    let mut g = Grouped {
        counts: Vec::new(),
        sums: Vec::new(),
        second_moment: DMatrix::zeros(d, d),
        total: xs.len(),
    };
    for (x, l) in xs.iter().zip(labels) {
        let i = *index.entry(l).or_insert_with(|| {
            g.counts.push(0);
            g.sums.push(DVector::zeros(d));
            g.counts.len() - 1
        });
        g.counts[i] += 1;
        g.sums[i] += x;
        g.second_moment.ger(1.0, x, x, 1.0);
    }
    let speakers = g.counts.len();
    if speakers < 2 {
        return Err(Error::DegenerateInput("PLDA training needs at least two speakers".into()));
    }
    let mut warnings = Vec::new();
    if g.counts.iter().all(|&n| n < 2) {
        let msg = "every speaker has a single session: between- and within-speaker covariances are not identifiable";
        log::warn!("{msg}");
        warnings.push(msg.to_string());
    }

    // moment-based starting point
    let mut regularized = 0;
    let means: Vec<DVector<f64>> = g.sums.iter().zip(&g.counts).map(|(s, &n)| s / n as f64).collect();
    let mu0 = means.iter().fold(DVector::zeros(d), |a, m| a + m) / speakers as f64;
    let mut between0 = DMatrix::zeros(d, d);
    for m in &means {
        let c = m - &mu0;
        between0.ger(1.0 / speakers as f64, &c, &c, 1.0);
    }
    let dof: usize = g.counts.iter().map(|n| n - 1).sum();
    let within0 = if dof > 0 {
        let mut scatter = g.second_moment.clone();
        for (s, &n) in g.sums.iter().zip(&g.counts) {
            scatter.ger(-1.0 / n as f64, s, s, 1.0);
        }
        scatter / dof as f64
    } else {
        &between0 * 0.5
    };
    let mut mu = mu0;
    let mut b = ensure_spd(between0, "between-speaker covariance", &mut regularized)?;
    let mut w = ensure_spd(within0, "within-speaker covariance", &mut regularized)?;

    let mut trace = Vec::with_capacity(opts.max_iter + 1);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let e = e_step(&g, &mu, &b, &w)?;
        if let Some(&prev) = trace.last() {
            if (e.ll - prev) <= opts.tol * e.ll.abs() {
                trace.push(e.ll);
                converged = true;
                break;
            }
        }
        trace.push(e.ll);
        let new_mu = &e.mean_sum / speakers as f64;
        let new_b = &e.between_acc / speakers as f64 - &new_mu * new_mu.transpose();
        let new_w = (&g.second_moment + &e.within_acc) / g.total as f64;
        mu = new_mu;
        b = ensure_spd(new_b, "between-speaker covariance", &mut regularized)?;
        w = ensure_spd(new_w, "within-speaker covariance", &mut regularized)?;
        iterations += 1;
    }
    if !converged {
        trace.push(e_step(&g, &mu, &b, &w)?.ll);
    }
    log::debug!("PLDA EM: {iterations} iterations, final log-likelihood {:.6}", trace.last().unwrap());
    Ok(PldaFit {
        model: PldaModel::new(mu, b, w)?,
        log_likelihood: trace,
        iterations,
        converged,
        regularized,
        warnings,
    })
}

/// Model plus the preprocessing mean captured at training time.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPlda {
    pub norm_mean: DVector<f64>,
    pub model: PldaModel,
    pub iterations: usize,
    pub tol: f64,
}

const MODEL_HEADER: &str = "bkprune-plda";

impl TrainedPlda {
    /// Preprocesses `xs` with their own mean, then runs EM.
    pub fn train<L: Eq + Hash>(xs: &[DVector<f64>], labels: &[L], opts: &FitOptions) -> Result<(Self, PldaFit)> {
        let norm_mean = mean_of(xs)?;
        let pre = preprocess(xs, Some(&norm_mean))?;
        let fit = fit_plda(&pre, labels, opts)?;
        Ok((
            Self {
                norm_mean,
                model: fit.model.clone(),
                iterations: fit.iterations,
                tol: opts.tol,
            },
            fit,
        ))
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn preprocess(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        length_normalize(x, &self.norm_mean)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{MODEL_HEADER} 1")?;
        writeln!(w, "dim {}", self.dim())?;
        writeln!(w, "iterations {}", self.iterations)?;
        writeln!(w, "tolerance {:e}", self.tol)?;
        writeln!(w, "end")?;
        for block in [
            Array::new(vec![self.dim()], self.norm_mean.iter().copied().collect())?,
            Array::new(vec![self.dim()], self.model.mean.iter().copied().collect())?,
            Array::from_matrix(&self.model.between),
            Array::from_matrix(&self.model.within),
        ] {
            block.write(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut fields = HashMap::new();
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != format!("{MODEL_HEADER} 1") {
            return Err(Error::Format(format!("not a PLDA model file: {:?}", line.trim())));
        }
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("PLDA header not terminated".into()));
            }
            let l = line.trim();
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields.get(k).ok_or_else(|| Error::Format(format!("missing header field {k}")))
        };
        let bad = |k: &str| Error::Format(format!("bad value for {k}"));
        let dim: usize = get("dim")?.parse().map_err(|_| bad("dim"))?;
        let iterations = get("iterations")?.parse().map_err(|_| bad("iterations"))?;
        let tol = get("tolerance")?.parse().map_err(|_| bad("tolerance"))?;
        let vector = |r: &mut R| -> Result<DVector<f64>> {
            let a = Array::read(r)?;
            if a.dims != [dim] {
                return Err(Error::Format("PLDA vector block has wrong shape".into()));
            }
            Ok(DVector::from_vec(a.data))
        };
        let norm_mean = vector(r)?;
        let mean = vector(r)?;
        let matrix = |r: &mut R| -> Result<DMatrix<f64>> {
            let a = Array::read(r)?;
            if a.dims != [dim, dim] {
                return Err(Error::Format("PLDA matrix block has wrong shape".into()));
            }
            a.to_matrix()
        };
        let between = matrix(r)?;
        let within = matrix(r)?;
        if !is_symmetric(&between, SYMMETRY_TOL) || !is_symmetric(&within, SYMMETRY_TOL) {
            return Err(Error::Format("PLDA covariance not symmetric".into()));
        }
        Ok(Self {
            norm_mean,
            model: PldaModel::new(mean, between, within)?,
            iterations,
            tol,
        })
    }
}

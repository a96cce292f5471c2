//! Detection metrics: EER, minDCF and Cllr_min.
//!
//! `labels[i]` is true for a target trial. Higher scores favour targets.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub effective_prior: f64,
    pub cost_miss: f64,
    pub cost_fa: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            effective_prior: 0.01,
            cost_miss: 1.0,
            cost_fa: 1.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.effective_prior > 0.0 && self.effective_prior < 1.0) {
            return Err(Error::Config(format!(
                "effective prior {} must lie in (0, 1)",
                self.effective_prior
            )));
        }
        if !(self.cost_miss > 0.0 && self.cost_fa > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub cllr_min: f64,
}

pub fn evaluate(scores: &[f64], labels: &[bool], cfg: &MetricConfig) -> Result<Metrics> {
    Ok(Metrics {
        eer: eer(scores, labels)?,
        min_dcf: min_dcf(scores, labels, cfg)?,
        cllr_min: cllr_min(scores, labels)?,
    })
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(scores.len(), labels.len(), "labels"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    let nt = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::SingleClass);
    }
    Ok((nt, nn))
}

/// Miss and false-alarm rates at every distinct threshold, from "accept
/// everything" to "reject everything". Tied scores move together.
fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (nt, nn) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = vec![(0.0, 1.0)];
    let (mut misses, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        points.push((misses as f64 / nt as f64, 1.0 - rejected_non as f64 / nn as f64));
    }
    Ok(points)
}

/// Equal-error rate, interpolating linearly between the two operating points
/// that bracket the crossing of the miss and false-alarm curves.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = operating_points(scores, labels)?;
    for w in pts.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        if m0 <= f0 && m1 >= f1 {
            let d0 = f0 - m0;
            let d1 = m1 - f1;
            if d0 + d1 == 0.0 {
                return Ok(m0);
            }
            let a = d0 / (d0 + d1);
            return Ok(m0 + a * (m1 - m0));
        }
    }
    unreachable!("miss rate rises from 0 to 1 while false alarms fall from 1 to 0")
}

/// Normalised detection cost at one operating point.
pub fn dcf(p_miss: f64, p_fa: f64, cfg: &MetricConfig) -> f64 {
    let p = cfg.effective_prior;
    let num = p * cfg.cost_miss * p_miss + (1.0 - p) * cfg.cost_fa * p_fa;
    num / (p * cfg.cost_miss).min((1.0 - p) * cfg.cost_fa)
}

pub fn min_dcf(scores: &[f64], labels: &[bool], cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(operating_points(scores, labels)?
        .into_iter()
        .map(|(m, f)| dcf(m, f, cfg))
        .fold(f64::INFINITY, f64::min))
}

const LLR_CLAMP: f64 = 35.0;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Isotonic (non-decreasing in score) fit of the target indicator. Tied
/// scores share one value.
pub fn pav(scores: &[f64], labels: &[bool]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // blocks of (sum, count, first position in `order`)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let start = i;
        let s = scores[order[i]];
        let mut sum = 0.0;
        while i < order.len() && scores[order[i]] == s {
            sum += labels[order[i]] as u8 as f64;
            i += 1;
        }
        blocks.push((sum, (i - start) as f64, start));
        while blocks.len() > 1 {
            let (s1, c1, _) = blocks[blocks.len() - 1];
            let (s0, c0, st) = blocks[blocks.len() - 2];
            if s0 / c0 < s1 / c1 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push((s0 + s1, c0 + c1, st));
        }
    }
    let mut fitted = vec![0.0; scores.len()];
    for (b, &(sum, count, start)) in blocks.iter().enumerate() {
        let end = blocks.get(b + 1).map_or(order.len(), |n| n.2);
        debug_assert_eq!(end - start, count as usize);
        for &o in &order[start..end] {
            fitted[o] = sum / count;
        }
    }
    fitted
}

/// Cllr of the PAV-calibrated scores, in bits.
pub fn cllr_min(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (nt, nn) = check(scores, labels)?;
    let post = pav(scores, labels);
    let prior_logodds = (nt as f64 / nn as f64).ln();
    let llr = |p: f64| -> f64 {
        let logit = match p.partial_cmp(&0.0) {
            Some(Ordering::Greater) if p < 1.0 => (p / (1.0 - p)).ln(),
            Some(Ordering::Greater) => f64::INFINITY,
            _ => f64::NEG_INFINITY,
        };
        (logit - prior_logodds).clamp(-LLR_CLAMP, LLR_CLAMP)
    };
    let (mut tar, mut non) = (0.0, 0.0);
    for (&p, &l) in post.iter().zip(labels) {
        if l {
            tar += softplus(-llr(p));
        } else {
            non += softplus(llr(p));
        }
    }
    Ok((tar / nt as f64 + non / nn as f64) / (2.0 * std::f64::consts::LN_2))
}

//! Training objectives: symmetric retrieval InfoNCE, localisation cross-entropy,
//! per-level matching InfoNCE, the batch-level re-ranking loss and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 100.0, beta: 10.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Learnable temperature stored as `log tau`.
#[derive(Clone, Copy, Debug)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore, name: &str, tau: f32) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::arg(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature { log_tau: store.add(name, Tensor::scalar(tau.ln())) })
    }

    pub fn value(&self, store: &ParamStore) -> f32 {
        store.value(self.log_tau).item().exp()
    }

    /// `1 / tau` as a differentiable scalar.
    pub fn inverse(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let lt = tape.param(store, self.log_tau)?;
        let neg = tape.neg(lt)?;
        tape.exp(neg)
    }
}

fn check_tau(tape: &Tape, tau: Var) -> Result<()> {
    let t = tape.value(tau);
    if t.len() != 1 || t.item() <= 0.0 {
        return Err(Error::arg(format!("temperature must be a positive scalar, got {:?}", t.data())));
    }
    Ok(())
}

/// Smoothed one-hot target over `n` classes.
pub fn smoothed_target(n: usize, positive: usize, smoothing: f32) -> Tensor {
    let off = smoothing / n as f32;
    let mut t = Tensor::full(&[n], off);
    t.data_mut()[positive] += 1.0 - smoothing;
    t
}

/// `-sum(target * log_softmax(logits))` along the last axis of a `[n]` vector.
fn cross_entropy(tape: &mut Tape, logits: Var, target: Tensor) -> Result<Var> {
    let lp = tape.log_softmax(logits, 0)?;
    let t = tape.constant(target)?;
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod)?;
    tape.neg(s)
}

/// InfoNCE of query `q` (`[C]`) against `refs` (`[N, C]`) with temperature `tau`.
pub fn info_nce(
    tape: &mut Tape,
    q: Var,
    refs: Var,
    positive: usize,
    tau: Var,
    smoothing: f32,
) -> Result<Var> {
    check_tau(tape, tau)?;
    let &[n, c] = tape.shape(refs) else {
        return Err(Error::dim(format!("references must be N x C, got {:?}", tape.shape(refs))));
    };
    if positive >= n {
        return Err(Error::arg(format!("positive index {positive} out of {n} references")));
    }
    let qc = tape.reshape(q, &[c, 1])?;
    let sims = tape.matmul(refs, qc)?;
    let sims = tape.reshape(sims, &[n])?;
    let inv = tape.recip(tau)?;
    let logits = tape.mul_scalar(sims, inv)?;
    cross_entropy(tape, logits, smoothed_target(n, positive, smoothing))
}

/// Symmetric in-batch InfoNCE over aligned `[B, C]` ground and aerial descriptors.
pub fn retrieval_loss(
    tape: &mut Tape,
    ground: Var,
    aerial: Var,
    inv_tau: Var,
    smoothing: f32,
) -> Result<Var> {
    let (gs, as_) = (tape.shape(ground).to_vec(), tape.shape(aerial).to_vec());
    if gs.len() != 2 || gs != as_ {
        return Err(Error::dim(format!("batches must both be B x C, got {gs:?} and {as_:?}")));
    }
    let b = gs[0];
    let at = tape.transpose(aerial)?;
    let sims = tape.matmul(ground, at)?;
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let mut y = Tensor::full(&[b, b], smoothing / b as f32);
    for i in 0..b {
        y.data_mut()[i * b + i] += 1.0 - smoothing;
    }
    let y = tape.constant(y)?;
    let rows = tape.log_softmax(logits, 1)?;
    let cols = tape.log_softmax(logits, 0)?;
    let both = tape.add(rows, cols)?;
    let prod = tape.mul(both, y)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -0.5 / b as f32)
}

fn check_distribution(name: &str, d: &Tensor) -> Result<()> {
    if d.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::arg(format!("{name} has negative or non-finite entries")));
    }
    let s = d.sum();
    if (s - 1.0).abs() > 1e-4 {
        return Err(Error::arg(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// `-sum(D_gt * log D)` for already-normalised distributions.
pub fn localization_loss(d: &Tensor, d_gt: &Tensor) -> Result<f32> {
    if d.shape() != d_gt.shape() {
        return Err(Error::dim(format!("D is {:?}, D_gt is {:?}", d.shape(), d_gt.shape())));
    }
    check_distribution("D", d)?;
    check_distribution("D_gt", d_gt)?;
    if d.data().iter().zip(d_gt.data()).any(|(&p, &t)| p <= 0.0 && t > 0.0) {
        return Err(Error::arg("D has zero mass where D_gt is positive"));
    }
    let v: f64 = d
        .data()
        .iter()
        .zip(d_gt.data())
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -(t as f64) * (p as f64).ln())
        .sum();
    Ok(v as f32)
}

/// The same cross-entropy on the tape, taking pre-softmax scores of any shape.
pub fn localization_loss_logits(tape: &mut Tape, logits: Var, d_gt: &Tensor) -> Result<Var> {
    if tape.shape(logits).iter().product::<usize>() != d_gt.len() {
        return Err(Error::dim(format!("logits {:?} vs target {:?}", tape.shape(logits), d_gt.shape())));
    }
    check_distribution("D_gt", d_gt)?;
    let flat = tape.reshape(logits, &[d_gt.len()])?;
    cross_entropy(tape, flat, d_gt.clone().reshaped(&[d_gt.len()])?)
}

/// Normalised 2D Gaussian of std `sigma` pixels centred on pixel `(x, y)`.
pub fn gaussian_target(size: usize, (x, y): (usize, usize), sigma: f32) -> Result<Tensor> {
    if x >= size || y >= size {
        return Err(Error::arg(format!("pixel ({x}, {y}) outside a {size}x{size} tile")));
    }
    if sigma <= 0.0 {
        let mut t = Tensor::zeros(&[size, size]);
        t.data_mut()[y * size + x] = 1.0;
        return Ok(t);
    }
    let inv = 1.0 / (2.0 * sigma as f64 * sigma as f64);
    let mut vals = vec![0.0f64; size * size];
    for r in 0..size {
        for c in 0..size {
            let (dx, dy) = (c as f64 - x as f64, r as f64 - y as f64);
            vals[r * size + c] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    let total: f64 = vals.iter().sum();
    Tensor::new(vec![size, size], vals.into_iter().map(|v| (v / total) as f32).collect())
}

/// Block-wise max of `d_gt` down to `side x side`, renormalised to sum 1.
pub fn level_weights(d_gt: &Tensor, side: usize) -> Result<Tensor> {
    let &[h, w] = d_gt.shape() else {
        return Err(Error::dim(format!("target must be L x L, got {:?}", d_gt.shape())));
    };
    if side == 0 || h % side != 0 || w % side != 0 || h != w {
        return Err(Error::dim(format!("{h}x{w} target cannot pool to {side}x{side}")));
    }
    let f = h / side;
    let mut out = vec![0.0f64; side * side];
    for r in 0..h {
        for c in 0..w {
            let o = &mut out[(r / f) * side + c / f];
            *o = o.max(d_gt.data()[r * w + c] as f64);
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("target has no mass"));
    }
    Tensor::new(vec![side, side], out.into_iter().map(|v| (v / total) as f32).collect())
}

/// `sum_l sum_ij w_l(i,j) * L'_l(i,j)` where `L'_l(i,j)` is the InfoNCE of cell
/// `(i,j)` against all cells of `M^l`.
///
/// Every cell shares the same denominator, so the per-level term is
/// `-sum_ij w_l(i,j) * log_softmax(M^l / tau)(i,j)`.
pub fn matching_loss(tape: &mut Tape, scores: &[Var], weights: &[Tensor], inv_tau: Var) -> Result<Var> {
    if scores.len() != weights.len() || scores.is_empty() {
        return Err(Error::dim(format!("{} score maps but {} weight maps", scores.len(), weights.len())));
    }
    let mut total: Option<Var> = None;
    for (l, (&m, w)) in scores.iter().zip(weights).enumerate() {
        let n: usize = tape.shape(m).iter().product();
        if n != w.len() {
            return Err(Error::dim(format!("level {l}: {n} cells but {} weights", w.len())));
        }
        let flat = tape.reshape(m, &[n])?;
        let logits = tape.mul_scalar(flat, inv_tau)?;
        let term = cross_entropy(tape, logits, w.clone().reshaped(&[n])?)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Level-0 cell containing pixel `(x, y)` of an `tile x tile` image, as a flat row index.
pub fn positive_cell((x, y): (usize, usize), tile: usize, side: usize) -> usize {
    let (cx, cy) = (x * side / tile, y * side / tile);
    cy * side + cx
}

/// InfoNCE of each ground descriptor against every level-0 cell of every aerial
/// map in the batch.
///
/// `ground` is `[B, C]` (unit rows), `cells[b]` the normalised `[N, C]` cell rows
/// of aerial map `b`, and `positives[b]` the GT cell inside map `b`.
pub fn rerank_loss(
    tape: &mut Tape,
    ground: Var,
    cells: &[Var],
    positives: &[usize],
    inv_tau: Var,
) -> Result<Var> {
    let &[b, _] = tape.shape(ground) else {
        return Err(Error::dim(format!("ground batch must be B x C, got {:?}", tape.shape(ground))));
    };
    if cells.len() != b || positives.len() != b {
        return Err(Error::dim(format!(
            "{b} ground rows, {} cell maps, {} positives",
            cells.len(),
            positives.len()
        )));
    }
    let n = tape.shape(cells[0])[0];
    if let Some(&p) = positives.iter().find(|&&p| p >= n) {
        return Err(Error::arg(format!("positive cell {p} out of {n}")));
    }
    let all = tape.concat(cells, 0)?;
    let all_t = tape.transpose(all)?;
    let sims = tape.matmul(ground, all_t)?;
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let lp = tape.log_softmax(logits, 1)?;
    let total = b * n;
    let mut target = Tensor::zeros(&[b, total]);
    for (i, &p) in positives.iter().enumerate() {
        target.data_mut()[i * total + i * n + p] = 1.0;
    }
    let t = tape.constant(target)?;
    let prod = tape.mul(lp, t)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f32)
}

/// Scalar values of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f32,
    pub l_g: f32,
    pub l_m: f32,
    pub l_r: f32,
}

impl LossBreakdown {
    /// `L_D + alpha L_G + beta L_M + gamma L_R`; fails naming the first non-finite term.
    pub fn total(&self, w: &LossWeights) -> Result<f32> {
        for (name, v) in [("L_D", self.l_d), ("L_G", self.l_g), ("L_M", self.l_m), ("L_R", self.l_r)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} = {v}")));
            }
        }
        Ok(self.l_d + w.alpha * self.l_g + w.beta * self.l_m + w.gamma * self.l_r)
    }
}

/// Tape version of the weighted total; any term may be absent (contributes 0).
pub fn total_loss(
    tape: &mut Tape,
    l_d: Option<Var>,
    l_g: Option<Var>,
    l_m: Option<Var>,
    l_r: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (name, term, weight) in
        [("L_D", l_d, 1.0), ("L_G", l_g, w.alpha), ("L_M", l_m, w.beta), ("L_R", l_r, w.gamma)]
    {
        let Some(v) = term else { continue };
        let val = tape.value(v);
        if val.len() != 1 || !val.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {:?}", val.data())));
        }
        let scaled = tape.scale(v, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown { l_d: 1.0, l_g: 1.0, l_m: 1.0, l_r: 1.0 };
        assert_eq!(b.total(&LossWeights::default()).unwrap(), 112.0);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert_eq!(b.total(&zero).unwrap(), 1.0);
        let bad = LossBreakdown { l_m: f32::NAN, ..b };
        let err = bad.total(&LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("L_M"), "{err}");
    }

    #[test]
    fn gaussian_and_weights_normalised() {
        let t = gaussian_target(96, (40, 52), 4.0).unwrap();
        assert!((t.sum() - 1.0).abs() < 1e-6);
        assert_eq!(t.argmax(), 52 * 96 + 40);
        for side in [12, 24, 48] {
            let w = level_weights(&t, side).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-6);
            assert_eq!(w.argmax(), positive_cell((40, 52), 96, side));
        }
        assert!(level_weights(&t, 7).is_err());
        assert!(gaussian_target(96, (96, 0), 4.0).is_err());
    }

    #[test]
    fn localization_rejects_unnormalised() {
        let d = Tensor::full(&[2, 2], 0.25);
        let mut gt = Tensor::zeros(&[2, 2]);
        gt.data_mut()[3] = 1.0;
        assert!((localization_loss(&d, &gt).unwrap() - 4f32.ln()).abs() < 1e-6);
        assert!(localization_loss(&Tensor::full(&[2, 2], 0.3), &gt).is_err());
        assert!(localization_loss(&d, &Tensor::full(&[2, 2], 0.3)).is_err());
    }

    #[test]
    fn temperature_is_positive() {
        let mut store = ParamStore::new();
        assert!(Temperature::new(&mut store, "tau", 0.0).is_err());
        let t = Temperature::new(&mut store, "tau", 0.07).unwrap();
        assert!((t.value(&store) - 0.07).abs() < 1e-7);
        let mut tape = Tape::new();
        let inv = t.inverse(&mut tape, &store).unwrap();
        assert!((tape.value(inv).item() - 1.0 / 0.07).abs() < 1e-3);
    }
}

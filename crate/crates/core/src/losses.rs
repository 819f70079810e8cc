//! Soft-Dice, centroid and control-point losses, their sum, and analytic
//! gradients through the deformation chain.

use serde::{Deserialize, Serialize};

use crate::affine::ClassShifts;
use crate::error::{Error, Result};
use crate::pipeline::{Deformer, Forward};
use crate::prior::{normalize, normalize_backward};
use crate::tps::{Displacements, TpsSystem};
use crate::volume::{one_hot, Coord, LabelMap, Volume};

/// Default Soft-Dice smoothing term (denominator only).
pub const DICE_EPS: f64 = 1e-5;
/// Channels with less soft mass than this have no centroid.
pub const CENTROID_FLOOR: f64 = 1e-8;

/// Weights of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Centroid-loss weight.
    pub gamma: f64,
    /// Control-point regularizer weight.
    pub lambda: f64,
    /// Soft-Dice denominator term.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.5,
            lambda: 1e-5,
            eps: DICE_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice_pred: f64,
    pub dice_prior: f64,
    pub centroid: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(dice_pred: f64, dice_prior: f64, centroid: f64, reg: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            dice_pred,
            dice_prior,
            centroid,
            reg,
            total: dice_pred + dice_prior + w.gamma * centroid + w.lambda * reg,
        }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("dice_pred", self.dice_pred),
            ("dice_prior", self.dice_prior),
            ("centroid", self.centroid),
            ("reg", self.reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradients of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d_theta: Vec<[f64; 3]>,
    pub d_delta: Vec<[f64; 3]>,
    /// Present when the prior was differentiated.
    pub d_prior: Option<Volume>,
}

fn check_same(a: &Volume, b: &Volume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "shape mismatch: {} x {:?} vs {} x {:?}",
            a.channels(),
            a.dims(),
            b.channels(),
            b.dims()
        )));
    }
    Ok(())
}

/// Soft-Dice loss `1 - mean_c 2 sum(yhat y) / (sum yhat + sum y + eps)`.
pub fn soft_dice(y: &Volume, yhat: &Volume, eps: f64) -> Result<f64> {
    check_same(y, yhat)?;
    if yhat.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::arg("predictions must lie in [0, 1]"));
    }
    Ok(dice_terms(y, yhat, eps).0)
}

/// Returns the loss and per-channel `(intersection, denominator)`.
fn dice_terms(y: &Volume, yhat: &Volume, eps: f64) -> (f64, Vec<(f64, f64)>) {
    let c_cls = y.channels();
    let mut terms = Vec::with_capacity(c_cls);
    let mut sum = 0.0;
    for c in 0..c_cls {
        let (mut inter, mut s_hat, mut s_y) = (0.0, 0.0, 0.0);
        for (a, b) in yhat.channel(c).iter().zip(y.channel(c)) {
            inter += a * b;
            s_hat += a;
            s_y += b;
        }
        let den = s_hat + s_y + eps;
        sum += 2.0 * inter / den;
        terms.push((inter, den));
    }
    (1.0 - sum / c_cls as f64, terms)
}

fn dice_grad(y: &Volume, terms: &[(f64, f64)]) -> Vec<f64> {
    let c_cls = y.channels() as f64;
    let n = y.dims().voxels();
    let mut g = vec![0.0; y.data().len()];
    for (c, &(inter, den)) in terms.iter().enumerate() {
        let base = 2.0 * inter / (den * den);
        for (gi, yi) in g[c * n..(c + 1) * n].iter_mut().zip(y.channel(c)) {
            *gi = -(2.0 * yi / den - base) / c_cls;
        }
    }
    g
}

/// Mean grid coordinate of each class; `None` for absent classes.
pub fn hard_centroids(y: &LabelMap, c_cls: usize) -> Vec<Option<Coord>> {
    let mut sums = vec![(Coord::default(), 0usize); c_cls];
    for (p, &l) in y.dims().coords().zip(y.labels()) {
        if l > 0 && (l as usize) <= c_cls {
            let s = &mut sums[l as usize - 1];
            s.0 = s.0 + p;
            s.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(s, k)| (k > 0).then(|| s * (1.0 / k as f64)))
        .collect()
}

/// Mass-weighted centroid of each channel; `None` below `floor` mass.
pub fn soft_centroids(v: &Volume, floor: f64) -> Result<Vec<Option<Coord>>> {
    if let Some(i) = v.data().iter().position(|&x| x < 0.0) {
        return Err(Error::arg(format!("negative activation at flat index {i}")));
    }
    Ok(soft_moments(v)
        .into_iter()
        .map(|(s, m)| (m >= floor).then(|| s * (1.0 / m)))
        .collect())
}

fn soft_moments(v: &Volume) -> Vec<(Coord, f64)> {
    let dims = v.dims();
    (0..v.channels())
        .map(|c| {
            let mut s = [0.0; 3];
            let mut m = 0.0;
            for (p, &x) in dims.coords().zip(v.channel(c)) {
                if x != 0.0 {
                    s[0] += p[0] * x;
                    s[1] += p[1] * x;
                    s[2] += p[2] * x;
                    m += x;
                }
            }
            (Coord(s), m)
        })
        .collect()
}

/// Mean Euclidean distance between the soft centroids of `pr_affine` and the
/// hard centroids of `y`, over classes present in both.
pub fn centroid_loss(pr_affine: &Volume, y: &LabelMap) -> Result<f64> {
    if pr_affine.dims() != y.dims() {
        return Err(Error::arg("centroid loss: dims mismatch"));
    }
    let target = hard_centroids(y, pr_affine.channels());
    Ok(centroid_terms(pr_affine, &target, CENTROID_FLOOR, false)?.0)
}

/// Loss and, optionally, its gradient with respect to `pr_affine`.
fn centroid_terms(
    pr_affine: &Volume,
    target: &[Option<Coord>],
    floor: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let moments = soft_moments(pr_affine);
    let mut shared = Vec::new();
    for (c, ((s, m), t)) in moments.iter().zip(target).enumerate() {
        if *m < 0.0 {
            return Err(Error::arg(format!("negative mass in channel {c}")));
        }
        if let (true, Some(t)) = (*m >= floor, t) {
            shared.push((c, *s * (1.0 / m), *m, *t));
        }
    }
    if shared.is_empty() {
        return Ok((0.0, want_grad.then(|| vec![0.0; pr_affine.data().len()])));
    }
    let k = shared.len() as f64;
    let loss = shared.iter().map(|(_, g, _, t)| g.distance(t)).sum::<f64>() / k;
    if !want_grad {
        return Ok((loss, None));
    }
    let dims = pr_affine.dims();
    let n = dims.voxels();
    let mut grad = vec![0.0; pr_affine.data().len()];
    for (c, g, m, t) in shared {
        let r = g - t;
        let dist = r.norm();
        if dist == 0.0 {
            continue;
        }
        let u = r * (1.0 / (dist * m * k));
        let offset = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
        for (gi, p) in grad[c * n..(c + 1) * n].iter_mut().zip(dims.coords()) {
            *gi = u[0] * p[0] + u[1] * p[1] + u[2] * p[2] - offset;
        }
    }
    Ok((loss, Some(grad)))
}

/// Sum of displacement magnitudes.
pub fn control_reg(disp: &Displacements) -> f64 {
    disp.0.iter().map(|d| Coord(*d).norm()).sum()
}

fn control_reg_grad(disp: &Displacements) -> Vec<[f64; 3]> {
    disp.0
        .iter()
        .map(|d| {
            let r = Coord(*d).norm();
            if r == 0.0 {
                [0.0; 3]
            } else {
                d.map(|x| x / r)
            }
        })
        .collect()
}

/// Total loss for one view. Without a network prediction `dice_pred` is zero.
pub fn total_loss(
    y: &LabelMap,
    yhat_pred: Option<&Volume>,
    pr_deformed: &Volume,
    pr_affine: &Volume,
    disp: &Displacements,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let c_cls = pr_deformed.channels();
    let hot = one_hot(y, c_cls)?;
    check_same(&hot, pr_deformed)?;
    check_same(&hot, pr_affine)?;
    let dice_pred = match yhat_pred {
        Some(p) => soft_dice(&hot, p, weights.eps)?,
        None => 0.0,
    };
    let dice_prior = soft_dice(&hot, pr_deformed, weights.eps)?;
    let centroid = centroid_loss(pr_affine, y)?;
    Ok(LossBreakdown::compose(dice_pred, dice_prior, centroid, control_reg(disp), weights))
}

/// Which gradients [`Objective::evaluate`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    /// Shifts and displacements, all loss terms.
    Deformation,
    /// Prior probabilities through the Soft-Dice term of the deformed prior only.
    PriorDice,
    /// Everything, every term.
    All,
}

/// Loss value, gradients and the deformed prior of one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub d_theta: Vec<[f64; 3]>,
    pub d_delta: Vec<[f64; 3]>,
    pub d_probs: Option<Vec<f64>>,
    pub forward: Forward,
}

/// Pure deformation-fitting objective against one label map.
#[derive(Clone, Debug)]
pub struct Objective {
    target: LabelMap,
    hot: Volume,
    centroids: Vec<Option<Coord>>,
    weights: LossWeights,
}

impl Objective {
    pub fn new(target: &LabelMap, c_cls: usize, weights: LossWeights) -> Result<Self> {
        Ok(Objective {
            target: target.clone(),
            hot: one_hot(target, c_cls)?,
            centroids: hard_centroids(target, c_cls),
            weights,
        })
    }

    pub fn target(&self) -> &LabelMap {
        &self.target
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn evaluate(
        &self,
        deformer: &Deformer,
        probs: &Volume,
        shifts: &ClassShifts,
        disp: &Displacements,
        wrt: Wrt,
    ) -> Result<Evaluation> {
        check_same(&self.hot, probs)?;
        let fwd = deformer.forward(probs, shifts, disp)?;
        let (dice_prior, terms) = dice_terms(&self.hot, &fwd.deformed, self.weights.eps);
        let need_centroid_grad = wrt != Wrt::PriorDice && self.weights.gamma != 0.0;
        let (centroid, c_grad) = centroid_terms(&fwd.affine, &self.centroids, CENTROID_FLOOR, need_centroid_grad)?;
        let reg = control_reg(disp);
        let loss = LossBreakdown::compose(0.0, dice_prior, centroid, reg, &self.weights);
        if let Some(name) = loss.first_non_finite() {
            return Err(Error::Numeric(format!("loss term `{name}` is not finite")));
        }

        let g_deformed = dice_grad(&self.hot, &terms);
        let g_extra = c_grad.map(|mut g| {
            g.iter_mut().for_each(|x| *x *= self.weights.gamma);
            g
        });
        let want_params = wrt != Wrt::PriorDice;
        let want_probs = wrt != Wrt::Deformation;
        let adj = deformer.backward(probs, shifts, &fwd, &g_deformed, g_extra.as_deref(), want_params, want_probs);
        let mut d_delta = adj.d_delta;
        if want_params && self.weights.lambda != 0.0 {
            for (d, r) in d_delta.iter_mut().zip(control_reg_grad(disp)) {
                for a in 0..3 {
                    d[a] += self.weights.lambda * r[a];
                }
            }
        }
        Ok(Evaluation {
            loss,
            d_theta: adj.d_theta,
            d_delta,
            d_probs: adj.d_probs,
            forward: fwd,
        })
    }
}

fn first_non_finite(name: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("gradient `{name}` is not finite at index {i}"))),
        None => Ok(()),
    }
}

/// Analytic gradients of the total loss for the pipeline
/// `softmax(logits) -> shifts -> TPS`, with the centroid term taken on the
/// shifted, pre-TPS prior.
pub fn grad_total(
    prior_logits: &Volume,
    shifts: &ClassShifts,
    disp: &Displacements,
    sys: &TpsSystem,
    y: &LabelMap,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let deformer = Deformer::new(sys, prior_logits.dims())?;
    let objective = Objective::new(y, prior_logits.channels(), *weights)?;
    let probs = normalize(prior_logits);
    let eval = objective.evaluate(&deformer, &probs, shifts, disp, Wrt::All)?;
    let d_logits = normalize_backward(&probs, eval.d_probs.as_deref().expect("requested"));
    first_non_finite("d_theta", eval.d_theta.as_flattened())?;
    first_non_finite("d_delta", eval.d_delta.as_flattened())?;
    first_non_finite("d_prior", &d_logits)?;
    let d_prior = Volume::from_data(prior_logits.channels(), prior_logits.dims(), d_logits)?;
    Ok((
        eval.loss,
        Gradients {
            d_theta: eval.d_theta,
            d_delta: eval.d_delta,
            d_prior: Some(d_prior),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dice_oracle(y: &[f64], yh: &[f64], c_cls: usize, eps: f64) -> f64 {
        let n = y.len() / c_cls;
        let mut acc = 0.0;
        for c in 0..c_cls {
            let mut num = 0.0;
            let mut den = eps;
            for i in 0..n {
                num += 2.0 * y[c * n + i] * yh[c * n + i];
                den += y[c * n + i] + yh[c * n + i];
            }
            acc += num / den;
        }
        1.0 - acc / c_cls as f64
    }

    #[test]
    fn dice_perfect_overlap() {
        let mut lm = LabelMap::background(Dims::cube(3)).unwrap();
        for d in 0..3 {
            lm.set(1, 1, d, 1);
        }
        let hot = one_hot(&lm, 1).unwrap();
        let l = soft_dice(&hot, &hot, 1e-5).unwrap();
        assert!((l - (1.0 - 6.0 / (6.0 + 1e-5))).abs() < 1e-15);
        assert!(l < 1e-5);
    }

    #[test]
    fn dice_disjoint() {
        let y = Volume::from_data(1, Dims::new(1, 1, 2), vec![1.0, 0.0]).unwrap();
        let yh = Volume::from_data(1, Dims::new(1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(soft_dice(&y, &yh, 1e-5).unwrap(), 1.0);
    }

    #[test]
    fn dice_empty_empty_scores_one() {
        let z = Volume::zeros(1, Dims::cube(2)).unwrap();
        assert_eq!(soft_dice(&z, &z, 1e-5).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        let a = Volume::zeros(1, Dims::cube(2)).unwrap();
        let b = Volume::zeros(2, Dims::cube(2)).unwrap();
        assert!(soft_dice(&a, &b, 1e-5).is_err());
        let c = Volume::from_data(1, Dims::cube(1), vec![1.5]).unwrap();
        let d = Volume::zeros(1, Dims::cube(1)).unwrap();
        assert!(soft_dice(&d, &c, 1e-5).is_err());
    }

    #[test]
    fn dice_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = Dims::cube(4);
        let labels = (0..64).map(|_| rng.gen_range(0..=3)).collect();
        let lm = LabelMap::from_labels(dims, labels).unwrap();
        let y = one_hot(&lm, 3).unwrap();
        let yh = Volume::from_data(3, dims, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let got = soft_dice(&y, &yh, 1e-5).unwrap();
        let want = dice_oracle(y.data(), yh.data(), 3, 1e-5);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn hard_centroid_examples() {
        let mut lm = LabelMap::background(Dims::cube(5)).unwrap();
        lm.set(2, 3, 4, 1);
        assert_eq!(hard_centroids(&lm, 2), vec![Some(Coord::new(2.0, 3.0, 4.0)), None]);
        let mut lm = LabelMap::background(Dims::cube(3)).unwrap();
        lm.set(0, 0, 0, 1);
        lm.set(2, 0, 0, 1);
        assert_eq!(hard_centroids(&lm, 1), vec![Some(Coord::new(1.0, 0.0, 0.0))]);
    }

    #[test]
    fn hard_centroids_match_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(6, 5, 4);
        let labels: Vec<u8> = (0..dims.voxels()).map(|_| rng.gen_range(0..=2)).collect();
        let lm = LabelMap::from_labels(dims, labels).unwrap();
        let got = hard_centroids(&lm, 2);
        for c in 1..=2u8 {
            let (mut s, mut k) = ([0.0; 3], 0.0);
            for h in 0..6 {
                for w in 0..5 {
                    for d in 0..4 {
                        if lm.get(h, w, d) == c {
                            s[0] += h as f64;
                            s[1] += w as f64;
                            s[2] += d as f64;
                            k += 1.0;
                        }
                    }
                }
            }
            let g = got[c as usize - 1].unwrap();
            for a in 0..3 {
                assert!((g[a] - s[a] / k).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_centroid_examples() {
        let mut lm = LabelMap::background(Dims::cube(4)).unwrap();
        lm.set(1, 2, 3, 2);
        lm.set(3, 2, 3, 2);
        let hot = one_hot(&lm, 2).unwrap();
        assert_eq!(soft_centroids(&hot, CENTROID_FLOOR).unwrap(), hard_centroids(&lm, 2));

        let uniform = Volume::from_data(1, Dims::cube(3), vec![0.5; 27]).unwrap();
        let c = soft_centroids(&uniform, CENTROID_FLOOR).unwrap()[0].unwrap();
        assert!(c.distance(&Coord::new(1.0, 1.0, 1.0)) < 1e-12);

        let neg = Volume::from_data(1, Dims::cube(1), vec![-0.1]).unwrap();
        assert!(soft_centroids(&neg, CENTROID_FLOOR).is_err());
    }

    #[test]
    fn centroid_loss_examples() {
        let mut lm = LabelMap::background(Dims::cube(6)).unwrap();
        lm.set(3, 4, 0, 1);
        let mut pr = Volume::zeros(1, Dims::cube(6)).unwrap();
        pr.set(0, 0, 0, 0, 0.7);
        assert!((centroid_loss(&pr, &lm).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(centroid_loss(&one_hot(&lm, 1).unwrap(), &lm).unwrap(), 0.0);
    }

    #[test]
    fn centroid_loss_skips_absent_classes() {
        let mut lm = LabelMap::background(Dims::cube(4)).unwrap();
        lm.set(0, 0, 0, 1);
        let mut pr = Volume::zeros(2, Dims::cube(4)).unwrap();
        pr.set(0, 0, 0, 2, 1.0);
        pr.set(1, 3, 3, 3, 1.0);
        assert!((centroid_loss(&pr, &lm).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reg_examples() {
        assert_eq!(control_reg(&Displacements::zeros(4)), 0.0);
        assert_eq!(control_reg(&Displacements(vec![[3.0, 4.0, 0.0], [0.0; 3]])), 5.0);
    }

    #[test]
    fn total_loss_composes() {
        let w = LossWeights::default();
        let b = LossBreakdown::compose(0.2, 0.3, 2.0, 10.0, &w);
        assert!((b.total - (0.2 + 0.3 + 1.0 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_inputs() {
        let mut lm = LabelMap::background(Dims::cube(4)).unwrap();
        lm.set(1, 1, 1, 1);
        lm.set(2, 2, 2, 1);
        let hot = one_hot(&lm, 1).unwrap();
        let b = total_loss(&lm, Some(&hot), &hot, &hot, &Displacements::zeros(8), &LossWeights::default()).unwrap();
        assert!(b.total < 1e-5);
        assert_eq!(b.centroid, 0.0);
    }
}

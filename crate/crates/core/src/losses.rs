//! Training objectives built from graph primitives, so their gradients come
//! from the same backward rules the gradient checks cover.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTH: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

fn check_inputs(g: &Graph, probs: Var, target: &Tensor, op: &'static str) -> Result<()> {
    if g.shape(probs) != target.shape() {
        return Err(shape_err(
            op,
            "target",
            format!("probabilities {:?} vs target {:?}", g.shape(probs), target.shape()),
        ));
    }
    if let Some(p) = g.value(probs).data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("{op}: probability {p} outside [0, 1]")));
    }
    if let Some(t) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract(format!("{op}: target value {t} is not binary")));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`.
pub fn dice_loss(g: &mut Graph, probs: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    check_inputs(g, probs, target, "dice_loss")?;
    if smooth < 0.0 {
        return Err(Error::Config(format!("dice_loss: negative smoothing {smooth}")));
    }
    let t = g.constant(target.clone());
    let inter = g.mul(probs, t)?;
    let inter = g.sum(inter);
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.sum(probs);
    let den = g.add_scalar(den, target.sum() + smooth);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean focal loss `-alpha_t (1 - p_t)^gamma ln(p_t)` over all voxels.
pub fn focal_loss(g: &mut Graph, probs: Var, target: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    check_inputs(g, probs, target, "focal_loss")?;
    if gamma < 0.0 || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("focal_loss: gamma {gamma}, alpha {alpha}")));
    }
    let td = target.data();
    let pd = g.value(probs).data();
    if let Some(i) = (0..td.len()).find(|&i| if td[i] == 1.0 { pd[i] == 0.0 } else { pd[i] == 1.0 }) {
        return Err(Error::Contract(format!(
            "focal_loss: voxel {i} assigns probability 0 to its true class"
        )));
    }
    let shape = target.shape().to_vec();
    // p_t = (2g - 1) p + (1 - g)
    let sign = g.constant(Tensor::from_fn(shape.clone(), |i| 2.0 * td[i] - 1.0));
    let offset = g.constant(Tensor::from_fn(shape.clone(), |i| 1.0 - td[i]));
    let alpha_t = g.constant(Tensor::from_fn(
        shape,
        |i| {
            if td[i] == 1.0 {
                alpha
            } else {
                1.0 - alpha
            }
        },
    ));
    let pt = g.mul(probs, sign)?;
    let pt = g.add(pt, offset)?;
    let log_pt = g.log(pt);
    let weighted = g.mul(log_pt, alpha_t)?;
    let weighted = if gamma == 0.0 {
        weighted
    } else {
        let q = g.neg(pt);
        let q = g.add_scalar(q, 1.0);
        let q = g.pow_scalar(q, gamma);
        g.mul(weighted, q)?
    };
    let m = g.mean(weighted);
    Ok(g.neg(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: Vec<f64>, t: Vec<f64>, f: impl Fn(&mut Graph, Var, &Tensor) -> Result<Var>) -> Result<f64> {
        let n = p.len();
        let mut g = Graph::new();
        let pv = g.param(Tensor::new([n], p)?);
        let l = f(&mut g, pv, &Tensor::new([n], t)?)?;
        g.value(l).item()
    }

    #[test]
    fn dice_loss_is_zero_for_exact_binary_match() {
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let l = run(t.clone(), t, |g, p, t| dice_loss(g, p, t, 1.0)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn dice_loss_approaches_one_for_inverted_prediction() {
        let t = vec![1.0, 1.0, 0.0, 0.0];
        let p = t.iter().map(|v| 1.0 - v).collect();
        let l = run(p, t, |g, p, t| dice_loss(g, p, t, 1e-9)).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_loss_closed_form() {
        // 2*0.5 + 1 over 0.5 + 0.25 + 1 + 1
        let l = run(vec![0.5, 0.25], vec![1.0, 0.0], |g, p, t| dice_loss(g, p, t, 1.0)).unwrap();
        assert!((l - (1.0 - 2.0 / 2.75)).abs() < 1e-15);
    }

    #[test]
    fn dice_loss_rejects_out_of_range() {
        let r = run(vec![1.5, 0.0], vec![1.0, 0.0], |g, p, t| dice_loss(g, p, t, 1.0));
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = run(vec![0.5, 0.0], vec![2.0, 0.0], |g, p, t| dice_loss(g, p, t, 1.0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn focal_single_voxel_closed_form() {
        let l = run(vec![0.5], vec![1.0], |g, p, t| focal_loss(g, p, t, 2.0, 0.25)).unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
        assert!((l - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn focal_confident_predictions_vanish() {
        let l = run(vec![1.0 - 1e-9, 1e-9], vec![1.0, 0.0], |g, p, t| {
            focal_loss(g, p, t, 2.0, 0.25)
        })
        .unwrap();
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn focal_without_focusing_is_weighted_cross_entropy() {
        let p = vec![0.2, 0.7, 0.9, 0.4];
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let l = run(p.clone(), t.clone(), |g, p, t| focal_loss(g, p, t, 0.0, 0.5)).unwrap();
        let bce: f64 = p
            .iter()
            .zip(&t)
            .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((l - 0.5 * bce).abs() < 1e-15);
    }

    #[test]
    fn focal_rejects_zero_probability_on_true_class() {
        let r = run(vec![0.0], vec![1.0], |g, p, t| focal_loss(g, p, t, 2.0, 0.25));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}

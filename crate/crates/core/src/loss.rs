//! Likelihood and sparsity-adaptive distributional consistency losses.
//!
//! Every subtree is scored by one of three kernels depending on the family
//! of its parent and children:
//!
//! * all Gaussian: Gaussian consistency kernel against the weighted
//!   aggregate of the children;
//! * all Poisson: Poisson divergence between the parent rate and the
//!   weighted sum of child rates;
//! * Gaussian parent with Poisson children: children are replaced by their
//!   normal approximation `N(lambda, sqrt(lambda))`, then the Gaussian kernel.
//!
//! A Poisson parent with a Gaussian child cannot occur after classification
//! and is rejected.

use crate::distributions::{
    gaussian_consistency_grad, gaussian_loglik, gaussian_loglik_grad, poisson_jsd_grad,
    poisson_loglik, poisson_loglik_grad, ForecastDist, GaussianParams,
};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

/// Lower clamp for sigma and lambda inside losses.
pub const PARAM_FLOOR: f64 = 1e-6;

/// Gradient w.r.t. one distribution: `d_loc` is d/d mu (Gaussian) or
/// d/d lambda (Poisson); `d_scale` is d/d sigma and zero for Poisson.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistGrad {
    pub d_loc: f64,
    pub d_scale: f64,
}

/// Mean, variance and the variance's derivative w.r.t. the scale parameter,
/// for the Gaussian view of a distribution.
fn gaussian_view(d: &ForecastDist) -> Result<(f64, f64, f64)> {
    match *d {
        ForecastDist::Gaussian(g) => {
            let s = g.sigma.max(PARAM_FLOOR);
            let dvar = if g.sigma > PARAM_FLOOR { 2.0 * s } else { 0.0 };
            Ok((g.mu, s * s, dvar))
        }
        ForecastDist::Poisson(p) => {
            let l = p.lambda.max(PARAM_FLOOR);
            Ok((l, l, 0.0))
        }
        ForecastDist::ScaledPoisson(_) => Err(Error::invalid(
            "consistency losses need normalized-scale forecasts",
        )),
    }
}

/// Value and gradients of the consistency loss of one subtree.
pub fn dcrs_subtree_grad(
    parent: &ForecastDist,
    children: &[ForecastDist],
    phi: &[f64],
) -> Result<(f64, DistGrad, Vec<DistGrad>)> {
    if children.is_empty() {
        return Err(Error::invalid("subtree without children"));
    }
    if children.len() != phi.len() {
        return Err(Error::invalid("children and weights differ in length"));
    }
    let mut child_grads = vec![DistGrad::default(); children.len()];
    match parent {
        ForecastDist::Poisson(p) => {
            if children.iter().any(|c| !matches!(c, ForecastDist::Poisson(_))) {
                return Err(Error::invalid("a sparse parent cannot have a dense child"));
            }
            let agg = children
                .iter()
                .zip(phi)
                .map(|(c, w)| w * c.mean().max(PARAM_FLOOR))
                .sum::<f64>()
                .max(PARAM_FLOOR);
            let lp = p.lambda.max(PARAM_FLOOR);
            let (value, d_parent, d_agg) = poisson_jsd_grad(lp, agg);
            let parent_grad = DistGrad {
                d_loc: if p.lambda > PARAM_FLOOR { d_parent } else { 0.0 },
                d_scale: 0.0,
            };
            for ((g, c), w) in child_grads.iter_mut().zip(children).zip(phi) {
                if c.mean() > PARAM_FLOOR {
                    g.d_loc = w * d_agg;
                }
            }
            Ok((value, parent_grad, child_grads))
        }
        ForecastDist::Gaussian(_) => {
            let (mu_p, var_p, dvar_p) = gaussian_view(parent)?;
            let mut mu_a = 0.0;
            let mut var_a = 0.0;
            let mut views = Vec::with_capacity(children.len());
            for (c, w) in children.iter().zip(phi) {
                let v = gaussian_view(c)?;
                mu_a += w * v.0;
                var_a += w * w * v.1;
                views.push(v);
            }
            let k = gaussian_consistency_grad(mu_p, var_p, mu_a, var_a);
            let parent_grad = DistGrad {
                d_loc: k.d_mu_parent,
                d_scale: k.d_var_parent * dvar_p,
            };
            for (((g, c), w), v) in child_grads.iter_mut().zip(children).zip(phi).zip(&views) {
                match c {
                    ForecastDist::Gaussian(_) => {
                        g.d_loc = w * k.d_mu_agg;
                        g.d_scale = w * w * k.d_var_agg * v.2;
                    }
                    _ => {
                        // mean and variance are both lambda
                        if c.mean() > PARAM_FLOOR {
                            g.d_loc = w * k.d_mu_agg + w * w * k.d_var_agg;
                        }
                    }
                }
            }
            Ok((k.value, parent_grad, child_grads))
        }
        ForecastDist::ScaledPoisson(_) => Err(Error::invalid(
            "consistency losses need normalized-scale forecasts",
        )),
    }
}

/// Consistency loss of one subtree.
pub fn dcrs_subtree(parent: &ForecastDist, children: &[ForecastDist], phi: &[f64]) -> Result<f64> {
    dcrs_subtree_grad(parent, children, phi).map(|r| r.0)
}

/// Per-internal-node totals (summed over steps, then averaged over steps)
/// and their sum. `dists` is indexed `[node][step]`.
pub fn dcrs_breakdown(dists: &[Vec<ForecastDist>], h: &Hierarchy) -> Result<(f64, Vec<(usize, f64)>)> {
    if dists.len() != h.len() {
        return Err(Error::invalid("forecast rows do not match hierarchy size"));
    }
    let steps = dists.first().map_or(0, Vec::len);
    if steps == 0 {
        return Err(Error::invalid("forecasts have no horizon steps"));
    }
    let mut per_node = Vec::new();
    let mut total = 0.0;
    for i in h.internal_nodes() {
        let mut acc = 0.0;
        for s in 0..steps {
            let children: Vec<ForecastDist> = h.children(i).iter().map(|&c| dists[c][s]).collect();
            acc += dcrs_subtree(&dists[i][s], &children, h.phi(i))?;
        }
        let v = acc / steps as f64;
        total += v;
        per_node.push((i, v));
    }
    Ok((total, per_node))
}

/// Sum over internal nodes of the subtree losses, averaged over horizon steps.
pub fn dcrs_total(dists: &[Vec<ForecastDist>], h: &Hierarchy) -> Result<f64> {
    dcrs_breakdown(dists, h).map(|r| r.0)
}

/// Distributional consistency error of held-out forecasts; the same
/// quantity as [`dcrs_total`], reported as an evaluation metric.
pub fn dce_metric(dists: &[Vec<ForecastDist>], h: &Hierarchy) -> Result<f64> {
    dcrs_total(dists, h)
}

/// Gradients of [`dcrs_total`] w.r.t. every forecast, `[node][step]`,
/// together with the loss value.
pub fn dcrs_total_grad(dists: &[Vec<ForecastDist>], h: &Hierarchy) -> Result<(f64, Vec<Vec<DistGrad>>)> {
    let steps = dists.first().map_or(0, Vec::len);
    let mut grads = vec![vec![DistGrad::default(); steps]; dists.len()];
    let mut total = 0.0;
    let inv = 1.0 / steps as f64;
    for i in h.internal_nodes() {
        for s in 0..steps {
            let children: Vec<ForecastDist> = h.children(i).iter().map(|&c| dists[c][s]).collect();
            let (v, gp, gc) = dcrs_subtree_grad(&dists[i][s], &children, h.phi(i))?;
            total += v * inv;
            grads[i][s].d_loc += gp.d_loc * inv;
            grads[i][s].d_scale += gp.d_scale * inv;
            for (&c, g) in h.children(i).iter().zip(&gc) {
                grads[c][s].d_loc += g.d_loc * inv;
                grads[c][s].d_scale += g.d_scale * inv;
            }
        }
    }
    Ok((total, grads))
}

fn nll_one(y: f64, d: &ForecastDist) -> Result<(f64, DistGrad)> {
    match *d {
        ForecastDist::Gaussian(g) => {
            let s = g.sigma.max(PARAM_FLOOR);
            let ll = gaussian_loglik(y, &GaussianParams { mu: g.mu, sigma: s });
            let (dm, ds) = gaussian_loglik_grad(y, g.mu, s);
            Ok((
                -ll,
                DistGrad {
                    d_loc: -dm,
                    d_scale: if g.sigma > PARAM_FLOOR { -ds } else { 0.0 },
                },
            ))
        }
        ForecastDist::Poisson(p) => {
            let l = p.lambda.max(PARAM_FLOOR);
            let ll = poisson_loglik(y, l)?;
            let d = if p.lambda > PARAM_FLOOR {
                -poisson_loglik_grad(y, l)
            } else {
                0.0
            };
            Ok((-ll, DistGrad { d_loc: d, d_scale: 0.0 }))
        }
        ForecastDist::ScaledPoisson(_) => Err(Error::invalid(
            "likelihood needs normalized-scale forecasts",
        )),
    }
}

/// Negative log-likelihood per node (summed over steps) and gradients.
pub fn likelihood_loss_grad(
    dists: &[Vec<ForecastDist>],
    targets: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<DistGrad>>)> {
    if dists.len() != targets.len() {
        return Err(Error::invalid("targets do not align with forecasts"));
    }
    let mut per_node = Vec::with_capacity(dists.len());
    let mut grads = Vec::with_capacity(dists.len());
    for (row, ys) in dists.iter().zip(targets) {
        if row.len() != ys.len() {
            return Err(Error::invalid("targets do not align with forecasts"));
        }
        let mut acc = 0.0;
        let mut g = Vec::with_capacity(row.len());
        for (d, &y) in row.iter().zip(ys) {
            let (v, dg) = nll_one(y, d)?;
            acc += v;
            g.push(dg);
        }
        per_node.push(acc);
        grads.push(g);
    }
    Ok((per_node, grads))
}

/// Negative log-likelihood summed over nodes and steps for one window.
pub fn likelihood_loss(dists: &[Vec<ForecastDist>], targets: &[Vec<f64>]) -> Result<f64> {
    likelihood_loss_grad(dists, targets).map(|(v, _)| v.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PoissonParams;
    use proptest::prelude::*;

    fn g(mu: f64, sigma: f64) -> ForecastDist {
        ForecastDist::Gaussian(GaussianParams { mu, sigma })
    }
    fn p(lambda: f64) -> ForecastDist {
        ForecastDist::Poisson(PoissonParams { lambda })
    }

    #[test]
    fn subtree_examples() {
        let v = dcrs_subtree(&g(5.0, 5f64.sqrt()), &[p(2.0), p(3.0)], &[1.0, 1.0]).unwrap();
        assert!(v.abs() < 1e-12);
        let v = dcrs_subtree(&g(5.0, 2.0), &[p(2.0), p(3.0)], &[1.0, 1.0]).unwrap();
        assert!((v - 0.0125).abs() < 1e-12);
        let v = dcrs_subtree(&p(4.0), &[p(1.0), p(1.0)], &[1.0, 1.0]).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(dcrs_subtree(&p(4.0), &[g(1.0, 1.0)], &[1.0]).is_err());
        assert!(dcrs_subtree(&g(4.0, 1.0), &[], &[]).is_err());
    }

    #[test]
    fn totals_are_additive() {
        // root -> {2, 3}, 2 -> {4, 5}: two internal nodes
        let h = Hierarchy::from_edges(&[(1, 2), (1, 3), (2, 4), (2, 5)])
            .unwrap()
            .with_phi(crate::hierarchy::PhiMode::Uniform);
        let dists = vec![
            vec![g(2.5, 1.0)],
            vec![p(2.0)],
            vec![p(3.0)],
            vec![p(1.0)],
            vec![p(1.0)],
        ];
        let (total, per) = dcrs_breakdown(&dists, &h).unwrap();
        let root = dcrs_subtree(&dists[0][0], &[p(2.0), p(3.0)], &[0.5, 0.5]).unwrap();
        let mid = dcrs_subtree(&dists[1][0], &[p(1.0), p(1.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(per.len(), 2);
        assert!((total - root - mid).abs() < 1e-12);

        let single = Hierarchy::from_edges(&[(1, 2), (1, 3)]).unwrap();
        let d = vec![vec![g(5.0, 2.0)], vec![p(2.0)], vec![p(3.0)]];
        let half = dcrs_subtree(&d[0][0], &[p(2.0), p(3.0)], &[0.5, 0.5]).unwrap();
        assert!((dcrs_total(&d, &single).unwrap() - half).abs() < 1e-12);
        assert_eq!(dce_metric(&d, &single).unwrap(), dcrs_total(&d, &single).unwrap());
    }

    #[test]
    fn coherent_gaussians_have_zero_loss() {
        let h = Hierarchy::from_edges(&[(1, 2), (1, 3)]).unwrap();
        let s = (0.25f64 * 1.0 + 0.25 * 4.0).sqrt();
        let d = vec![vec![g(3.0, s); 2], vec![g(2.0, 1.0); 2], vec![g(4.0, 2.0); 2]];
        assert!(dcrs_total(&d, &h).unwrap().abs() < 1e-12);
    }

    #[test]
    fn likelihood_examples() {
        let v = likelihood_loss(&[vec![g(1.0, 1.0)]], &[vec![1.0]]).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = likelihood_loss(&[vec![p(2.0)]], &[vec![0.0]]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let both = likelihood_loss(&[vec![g(1.0, 1.0)], vec![p(2.0)]], &[vec![1.0], vec![0.0]]).unwrap();
        assert!((both - 2.918_938_533_204_672_7).abs() < 1e-12);
    }

    fn fd(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
        (f(x + 1e-6) - f(x - 1e-6)) / 2e-6
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-2)
    }

    proptest! {
        #[test]
        fn subtree_gradients(mp in 0.5..5.0f64, sp in 0.3..3.0f64, m1 in 0.5..3.0f64, s1 in 0.3..2.0f64,
                             l2 in 0.3..4.0f64, w1 in 0.1..1.0f64, w2 in 0.1..1.0f64) {
            // mixed case
            let f = |mp: f64, sp: f64, m1: f64, s1: f64, l2: f64| {
                dcrs_subtree(&g(mp, sp), &[g(m1, s1), p(l2)], &[w1, w2]).unwrap()
            };
            let (_, gp, gc) = dcrs_subtree_grad(&g(mp, sp), &[g(m1, s1), p(l2)], &[w1, w2]).unwrap();
            prop_assert!(close(gp.d_loc, fd(&|x| f(x, sp, m1, s1, l2), mp)));
            prop_assert!(close(gp.d_scale, fd(&|x| f(mp, x, m1, s1, l2), sp)));
            prop_assert!(close(gc[0].d_loc, fd(&|x| f(mp, sp, x, s1, l2), m1)));
            prop_assert!(close(gc[0].d_scale, fd(&|x| f(mp, sp, m1, x, l2), s1)));
            prop_assert!(close(gc[1].d_loc, fd(&|x| f(mp, sp, m1, s1, x), l2)));

            // sparse case
            let q = |a: f64, b: f64, c: f64| dcrs_subtree(&p(a), &[p(b), p(c)], &[w1, w2]).unwrap();
            let (_, gp, gc) = dcrs_subtree_grad(&p(mp), &[p(m1), p(l2)], &[w1, w2]).unwrap();
            prop_assert!(close(gp.d_loc, fd(&|x| q(x, m1, l2), mp)));
            prop_assert!(close(gc[0].d_loc, fd(&|x| q(mp, x, l2), m1)));
            prop_assert!(close(gc[1].d_loc, fd(&|x| q(mp, m1, x), l2)));
        }

        #[test]
        fn subtree_nonnegative(mp in -5.0..5.0f64, sp in 0.1..3.0f64, l1 in 0.1..5.0f64, l2 in 0.1..5.0f64) {
            prop_assert!(dcrs_subtree(&g(mp, sp), &[p(l1), p(l2)], &[1.0, 1.0]).unwrap() >= -1e-12);
            prop_assert!(dcrs_subtree(&p(l1 + l2 + mp.abs()), &[p(l1), p(l2)], &[1.0, 1.0]).unwrap() >= 0.0);
        }
    }
}

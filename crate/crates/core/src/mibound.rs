//! Exact verification of the residual lower bound on discrete joints.
//!
//! For a joint distribution over (memory feature m, previous action a_prev,
//! current action a_cur) with integer action alphabet, the residual
//! r = a_cur - a_prev is a bijection of a_cur given a_prev, and
//!
//! ```text
//! I(m; a_cur | a_prev) >= H(r | a_prev) - H(r | m)
//! ```
//!
//! [`verify_theorem1`] checks the inequality together with each equality of
//! the derivation, by exact summation over the table (log base 2, 0·log 0 = 0).
//! Continuous actions are out of scope here: the integer alphabet makes the
//! residual exact, and the inequality is alphabet-agnostic.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("distribution sums to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("alphabet sizes must be at least 2, got M={m_card}, A={a_card}")]
    AlphabetTooSmall { m_card: usize, a_card: usize },
}

pub type Result<T> = std::result::Result<T, MiError>;

/// Explicit probability table p\[m\]\[a_prev\]\[a_cur\].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub m_card: usize,
    pub a_card: usize,
    /// Flat row-major table, index = (m * a_card + a_prev) * a_card + a_cur.
    pub p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(m_card: usize, a_card: usize, p: Vec<f64>) -> Result<Self> {
        if m_card < 2 || a_card < 2 {
            return Err(MiError::AlphabetTooSmall { m_card, a_card });
        }
        assert_eq!(p.len(), m_card * a_card * a_card, "table size mismatch");
        if let Some(&neg) = p.iter().find(|&&v| v < 0.0) {
            return Err(MiError::NegativeProbability(neg));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MiError::NotNormalized(total));
        }
        Ok(DiscreteJoint { m_card, a_card, p })
    }

    #[inline]
    pub fn prob(&self, m: usize, a_prev: usize, a_cur: usize) -> f64 {
        self.p[(m * self.a_card + a_prev) * self.a_card + a_cur]
    }

    /// Residual alphabet size: r = a_cur - a_prev in -(A-1)..=(A-1),
    /// stored at index r + (A-1).
    pub fn residual_card(&self) -> usize {
        2 * self.a_card - 1
    }

    /// Reindex the table to (m, a_prev, r). Exact: the map a_cur -> r is a
    /// bijection for fixed a_prev, entries are only moved, never combined.
    pub fn to_residual(&self) -> Vec<f64> {
        let rc = self.residual_card();
        let mut q = vec![0.0; self.m_card * self.a_card * rc];
        for m in 0..self.m_card {
            for ap in 0..self.a_card {
                for ac in 0..self.a_card {
                    let r = ac + (self.a_card - 1) - ap;
                    q[(m * self.a_card + ap) * rc + r] = self.prob(m, ap, ac);
                }
            }
        }
        q
    }
}

fn xlog2x(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// Shannon entropy of a marginal distribution, in bits.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if let Some(&neg) = dist.iter().find(|&&v| v < 0.0) {
        return Err(MiError::NegativeProbability(neg));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(MiError::NotNormalized(total));
    }
    Ok(-dist.iter().map(|&p| xlog2x(p)).sum::<f64>())
}

/// Entropy of a flat joint table assumed normalized by the caller.
fn entropy_unchecked(table: &[f64]) -> f64 {
    -table.iter().map(|&p| xlog2x(p)).sum::<f64>()
}

/// H(X|Y) from a joint table laid out as rows of Y: p\[y * x_card + x\].
pub fn cond_entropy(joint_yx: &[f64], y_card: usize, x_card: usize) -> Result<f64> {
    let total: f64 = joint_yx.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(MiError::NotNormalized(total));
    }
    // H(X|Y) = H(X,Y) - H(Y)
    let h_xy = entropy_unchecked(joint_yx);
    let mut py = vec![0.0; y_card];
    for (y, slot) in py.iter_mut().enumerate() {
        *slot = joint_yx[y * x_card..(y + 1) * x_card].iter().sum();
    }
    Ok(h_xy - entropy_unchecked(&py))
}

/// I(X;Y|Z) from a joint table indexed (z, x, y):
/// p\[(z * x_card + x) * y_card + y\].
pub fn cond_mutual_info(
    joint_zxy: &[f64],
    z_card: usize,
    x_card: usize,
    y_card: usize,
) -> Result<f64> {
    let total: f64 = joint_zxy.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(MiError::NotNormalized(total));
    }
    // I(X;Y|Z) = H(X,Z) + H(Y,Z) - H(X,Y,Z) - H(Z)
    let mut pz = vec![0.0; z_card];
    let mut pxz = vec![0.0; z_card * x_card];
    let mut pyz = vec![0.0; z_card * y_card];
    for z in 0..z_card {
        for x in 0..x_card {
            for y in 0..y_card {
                let p = joint_zxy[(z * x_card + x) * y_card + y];
                pz[z] += p;
                pxz[z * x_card + x] += p;
                pyz[z * y_card + y] += p;
            }
        }
    }
    Ok(entropy_unchecked(&pxz) + entropy_unchecked(&pyz)
        - entropy_unchecked(joint_zxy)
        - entropy_unchecked(&pz))
}

/// Residuals of the four derivation steps plus the final inequality slack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// I(m; a_cur | a_prev)
    pub lhs: f64,
    /// H(r | a_prev) - H(r | m)
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// |I(m; a_cur | a_prev) - I(m; r | a_prev)| — residual bijection step.
    pub step_bijection: f64,
    /// |I(m; r | a_prev) - (H(m|a_prev) + H(r|a_prev) - H(m,r|a_prev))| —
    /// chain-rule expansion.
    pub step_chain_rule: f64,
    /// |I(m; r | a_prev) - (H(r|a_prev) - H(r|m,a_prev))| — elimination of
    /// H(m|a_prev) via the joint.
    pub step_elimination: f64,
    /// H(r|m) - H(r|m,a_prev) >= 0 — conditioning reduces entropy.
    pub step_conditioning: f64,
}

/// Tolerance on the inequality slack used for `holds`.
pub const SLACK_TOL: f64 = 1e-9;

/// Check the bound and every step of its derivation on one joint.
pub fn verify_theorem1(joint: &DiscreteJoint) -> Theorem1Report {
    let (mc, ac, rc) = (joint.m_card, joint.a_card, joint.residual_card());

    // reindex (m, a_prev, a_cur) -> (a_prev, m, a_cur) for I(m; a_cur | a_prev)
    let mut by_prev = vec![0.0; mc * ac * ac];
    for m in 0..mc {
        for ap in 0..ac {
            for a in 0..ac {
                by_prev[(ap * mc + m) * ac + a] = joint.prob(m, ap, a);
            }
        }
    }
    let lhs = cond_mutual_info(&by_prev, ac, mc, ac).expect("joint is normalized");

    // same with the residual variable
    let q = joint.to_residual(); // (m, a_prev, r)
    let mut q_by_prev = vec![0.0; ac * mc * rc];
    for m in 0..mc {
        for ap in 0..ac {
            for r in 0..rc {
                q_by_prev[(ap * mc + m) * rc + r] = q[(m * ac + ap) * rc + r];
            }
        }
    }
    let i_mr = cond_mutual_info(&q_by_prev, ac, mc, rc).expect("joint is normalized");
    let step_bijection = (lhs - i_mr).abs();

    // marginals for the chain-rule and elimination steps
    let mut p_ap = vec![0.0; ac];
    let mut p_m_ap = vec![0.0; ac * mc]; // (a_prev, m)
    let mut p_r_ap = vec![0.0; ac * rc]; // (a_prev, r)
    let mut p_r_m = vec![0.0; mc * rc]; // (m, r)
    for m in 0..mc {
        for ap in 0..ac {
            for r in 0..rc {
                let p = q[(m * ac + ap) * rc + r];
                p_ap[ap] += p;
                p_m_ap[ap * mc + m] += p;
                p_r_ap[ap * rc + r] += p;
                p_r_m[m * rc + r] += p;
            }
        }
    }
    let h_ap = entropy_unchecked(&p_ap);
    let h_m_ap = entropy_unchecked(&p_m_ap) - h_ap; // H(m|a_prev)
    let h_r_ap = entropy_unchecked(&p_r_ap) - h_ap; // H(r|a_prev)
    let h_mr_ap = entropy_unchecked(&q) - h_ap; // H(m,r|a_prev)
    let step_chain_rule = (i_mr - (h_m_ap + h_r_ap - h_mr_ap)).abs();

    // H(r|m,a_prev) = H(m,a_prev,r) - H(m,a_prev)
    let h_r_m_ap = entropy_unchecked(&q) - entropy_unchecked(&p_m_ap);
    let step_elimination = (i_mr - (h_r_ap - h_r_m_ap)).abs();

    // H(r|m) = H(r,m) - H(m)
    let mut p_m = vec![0.0; mc];
    for (m, slot) in p_m.iter_mut().enumerate() {
        *slot = p_r_m[m * rc..(m + 1) * rc].iter().sum();
    }
    let h_r_m = entropy_unchecked(&p_r_m) - entropy_unchecked(&p_m);
    let step_conditioning = h_r_m - h_r_m_ap;

    let rhs = h_r_ap - h_r_m;
    let slack = lhs - rhs;

    Theorem1Report {
        lhs,
        rhs,
        slack,
        holds: slack >= -SLACK_TOL,
        step_bijection,
        step_chain_rule,
        step_elimination,
        step_conditioning,
    }
}

/// Dirichlet(concentration)-distributed joint, deterministic per seed.
pub fn random_joint(
    m_card: usize,
    a_card: usize,
    concentration: f64,
    seed: u64,
) -> Result<DiscreteJoint> {
    if m_card < 2 || a_card < 2 {
        return Err(MiError::AlphabetTooSmall { m_card, a_card });
    }
    assert!(concentration > 0.0, "concentration must be positive");
    let mut r = rng::stream(seed, "mibound/dirichlet", 0);
    let n = m_card * a_card * a_card;
    // Dirichlet via normalized Gammas, guarding against an all-zero draw
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r)).collect();
    let mut total: f64 = p.iter().sum();
    while total <= 0.0 {
        p = (0..n).map(|_| gamma.sample(&mut r)).collect();
        total = p.iter().sum();
    }
    for v in p.iter_mut() {
        *v /= total;
    }
    // renormalize once more so the 1e-12 sum check always passes
    let total: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= total;
    }
    DiscreteJoint::new(m_card, a_card, p)
}

/// Fuzz `trials` joints and collect the per-trial reports.
pub fn fuzz_slacks(
    trials: u64,
    m_card: usize,
    a_card: usize,
    seed: u64,
) -> Result<Vec<Theorem1Report>> {
    (0..trials)
        .map(|i| {
            let joint = random_joint(m_card, a_card, 1.0, rng::child_seed(seed, "trial", i))?;
            Ok(verify_theorem1(&joint))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_outcomes_is_one_bit() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_function_has_zero_cond_entropy() {
        // X = f(Y): p(y, x) concentrated on x = y
        let joint = [0.25, 0.0, 0.0, 0.75];
        assert!(cond_entropy(&joint, 2, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn independence_makes_cmi_equal_mi() {
        // X independent of Z: p(z, x, y) = p(z) * p(x, y)
        let pz = [0.3, 0.7];
        let pxy = [0.1, 0.4, 0.2, 0.3]; // rows x, cols y
        let mut joint = vec![0.0; 8];
        for z in 0..2 {
            for x in 0..2 {
                for y in 0..2 {
                    joint[(z * 2 + x) * 2 + y] = pz[z] * pxy[x * 2 + y];
                }
            }
        }
        let cmi = cond_mutual_info(&joint, 2, 2, 2).unwrap();
        // plain I(X;Y) from pxy
        let hx = entropy(&[0.5, 0.5]).unwrap();
        let hy = entropy(&[0.3, 0.7]).unwrap();
        let hxy = -pxy.iter().map(|&p| xlog2x(p)).sum::<f64>();
        let mi = hx + hy - hxy;
        assert!((cmi - mi).abs() < 1e-12, "cmi {cmi} mi {mi}");
    }

    #[test]
    fn independent_memory_satisfies_bound() {
        // m independent of (a_prev, a_cur): lhs = 0, rhs <= 0
        let pm = [0.4, 0.6];
        let paa = [0.1, 0.2, 0.3, 0.4];
        let mut p = vec![0.0; 8];
        for m in 0..2 {
            for ap in 0..2 {
                for ac in 0..2 {
                    p[(m * 2 + ap) * 2 + ac] = pm[m] * paa[ap * 2 + ac];
                }
            }
        }
        let joint = DiscreteJoint::new(2, 2, p).unwrap();
        let rep = verify_theorem1(&joint);
        assert!(rep.lhs.abs() < 1e-12);
        assert!(rep.rhs <= 1e-12);
        assert!(rep.holds);
    }

    #[test]
    fn deterministic_residual_given_memory_collapses_to_equality() {
        // r is a function of m: m=0 -> r=+1 (a_prev=0, a_cur=1),
        // m=1 -> r=-1 (a_prev=1, a_cur=0). Then H(r|m,a_prev) = H(r|m) = 0
        // and lhs == rhs >= 0.
        let mut p = vec![0.0; 8];
        p[1] = 0.5; // m=0, ap=0, ac=1
        p[(2 + 1) * 2] = 0.5; // m=1, ap=1, ac=0
        let joint = DiscreteJoint::new(2, 2, p).unwrap();
        let rep = verify_theorem1(&joint);
        assert!(rep.slack.abs() < 1e-12, "slack {}", rep.slack);
        assert!(rep.rhs >= 0.0);
        assert!(rep.holds);
    }

    #[test]
    fn fuzzed_joints_satisfy_bound_and_proof_steps() {
        let reports = fuzz_slacks(200, 4, 3, 11).unwrap();
        for rep in &reports {
            assert!(rep.holds, "violated: {rep:?}");
            assert!(rep.step_bijection < 1e-12);
            assert!(rep.step_chain_rule < 1e-12);
            assert!(rep.step_elimination < 1e-12);
            assert!(rep.step_conditioning >= -1e-12);
        }
    }

    #[test]
    fn data_processing_chain_on_fuzzed_joints() {
        for i in 0..50 {
            let joint = random_joint(3, 4, 0.7, 1000 + i).unwrap();
            let (mc, ac, rc) = (joint.m_card, joint.a_card, joint.residual_card());
            let q = joint.to_residual();
            let mut p_r = vec![0.0; rc];
            let mut p_rm = vec![0.0; mc * rc];
            let mut p_m_ap = vec![0.0; mc * ac];
            for m in 0..mc {
                for ap in 0..ac {
                    for r in 0..rc {
                        let p = q[(m * ac + ap) * rc + r];
                        p_r[r] += p;
                        p_rm[m * rc + r] += p;
                        p_m_ap[m * ac + ap] += p;
                    }
                }
            }
            let h_r = entropy_unchecked(&p_r);
            let mut p_m = vec![0.0; mc];
            for (m, slot) in p_m.iter_mut().enumerate() {
                *slot = p_rm[m * rc..(m + 1) * rc].iter().sum();
            }
            let h_r_m = entropy_unchecked(&p_rm) - entropy_unchecked(&p_m);
            let h_r_m_ap = entropy_unchecked(&q) - entropy_unchecked(&p_m_ap);
            assert!(h_r_m_ap <= h_r_m + 1e-12);
            assert!(h_r_m <= h_r + 1e-12);
            assert!(h_r_m_ap >= -1e-12);
        }
    }

    #[test]
    fn random_joint_is_normalized_and_reproducible() {
        let a = random_joint(4, 3, 1.0, 42).unwrap();
        let b = random_joint(4, 3, 1.0, 42).unwrap();
        assert_eq!(a.p, b.p);
        assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn high_concentration_approaches_uniform() {
        // max deviation from the uniform table shrinks with concentration
        let dev = |conc: f64| -> f64 {
            let mut worst: f64 = 0.0;
            for i in 0..20 {
                let j = random_joint(3, 3, conc, 500 + i).unwrap();
                let u = 1.0 / j.p.len() as f64;
                let d = j.p.iter().map(|&p| (p - u).abs()).fold(0.0_f64, f64::max);
                worst = worst.max(d);
            }
            worst
        };
        let low = dev(1.0);
        let high = dev(1000.0);
        assert!(
            high < low / 2.0,
            "deviation did not shrink: low {low}, high {high}"
        );
    }

    #[test]
    fn invalid_tables_are_rejected() {
        let err = DiscreteJoint::new(2, 2, vec![0.5; 8]).unwrap_err();
        assert!(matches!(err, MiError::NotNormalized(_)));
        let mut p = vec![0.0; 8];
        p[0] = 1.1;
        p[1] = -0.1;
        assert!(matches!(
            DiscreteJoint::new(2, 2, p),
            Err(MiError::NegativeProbability(_))
        ));
    }
}

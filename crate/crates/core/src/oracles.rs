//! Exact checks of the mutual-information gradient identities on small
//! discrete joints parameterized by a single softmax over all cells.
//!
//! With `p = softmax(θ)` over the `|X|×|Y|` table, `∂p(x,y)/∂θ_ab =
//! p(x,y)(δ − p(a,b))`, so `Σ_x p(x)` and `Σ_y p(y)` are identically 1 and
//! their derivatives vanish.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Joint distribution `p(x, y) = softmax(logits)` over a row-major table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    nx: usize,
    ny: usize,
    logits: Vec<f64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, logits: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || logits.len() != nx * ny {
            return Err(Error::Dimension {
                expected: nx * ny,
                found: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("joint logits must be finite".into()));
        }
        Ok(Self { nx, ny, logits })
    }

    /// Standard-normal logits drawn from `seed`.
    pub fn random(nx: usize, ny: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "oracle-joint", &[nx as u64, ny as u64]);
        let logits = (0..nx * ny).map(|_| StandardNormal.sample(&mut r)).collect();
        Self::new(nx, ny, logits)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn with_logit(&self, index: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.logits[index] = value;
        out
    }

    fn log_z(&self) -> f64 {
        log_sum_exp(self.logits.iter().copied())
    }

    /// `log p(x, y)` for every cell.
    pub fn log_probs(&self) -> Vec<f64> {
        let z = self.log_z();
        self.logits.iter().map(|l| l - z).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn log_px(&self) -> Vec<f64> {
        let z = self.log_z();
        (0..self.nx)
            .map(|x| log_sum_exp(self.logits[x * self.ny..(x + 1) * self.ny].iter().copied()) - z)
            .collect()
    }

    pub fn log_py(&self) -> Vec<f64> {
        let z = self.log_z();
        (0..self.ny)
            .map(|y| log_sum_exp((0..self.nx).map(|x| self.logits[x * self.ny + y])) - z)
            .collect()
    }

    pub fn px(&self) -> Vec<f64> {
        self.log_px().into_iter().map(f64::exp).collect()
    }

    pub fn py(&self) -> Vec<f64> {
        self.log_py().into_iter().map(f64::exp).collect()
    }

    /// `log p(x,y) / (p(x) p(y))` for every cell.
    fn log_ratios(&self) -> Vec<f64> {
        let lp = self.log_probs();
        let lx = self.log_px();
        let ly = self.log_py();
        (0..self.nx * self.ny)
            .map(|c| lp[c] - lx[c / self.ny] - ly[c % self.ny])
            .collect()
    }

    /// `log p(y | x)`.
    pub fn log_conditional(&self, x: usize, y: usize) -> Result<f64> {
        self.check_cell(x, y)?;
        Ok(self.log_probs()[x * self.ny + y] - self.log_px()[x])
    }

    fn check_cell(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.nx {
            return Err(Error::Index {
                index: x,
                size: self.nx,
            });
        }
        if y >= self.ny {
            return Err(Error::Index {
                index: y,
                size: self.ny,
            });
        }
        Ok(())
    }
}

/// `I(X;Y)` in nats.
pub fn exact_mi(j: &DiscreteJoint) -> f64 {
    j.probs().iter().zip(j.log_ratios()).map(|(p, l)| p * l).sum()
}

/// `Σ_{x,y} ∂p(x,y)/∂θ · log(p(x,y)/(p(x)p(y)))`, which reduces to
/// `p(a,b)(L(a,b) − I)` through the softmax Jacobian.
pub fn mi_gradient_simplified(j: &DiscreteJoint) -> Vec<f64> {
    let p = j.probs();
    let l = j.log_ratios();
    let mi: f64 = p.iter().zip(&l).map(|(p, l)| p * l).sum();
    p.iter().zip(&l).map(|(p, l)| p * (l - mi)).collect()
}

/// The gradient with every term kept: the log-ratio term plus
/// `Σ p(x,y)[∂p(x,y)/p(x,y) − ∂p(x)/p(x) − ∂p(y)/p(y)]`, evaluated cell by
/// cell without using the normalization identities.
pub fn mi_gradient_full(j: &DiscreteJoint) -> Vec<f64> {
    let (nx, ny) = (j.nx, j.ny);
    let p = j.probs();
    let px = j.px();
    let py = j.py();
    let l = j.log_ratios();
    let mut grad = vec![0.0; nx * ny];
    let mut dp = vec![0.0; nx * ny];
    for (ab, g) in grad.iter_mut().enumerate() {
        for (c, d) in dp.iter_mut().enumerate() {
            *d = p[c] * (f64::from(u8::from(c == ab)) - p[ab]);
        }
        let dpx: Vec<f64> = (0..nx).map(|x| dp[x * ny..(x + 1) * ny].iter().sum()).collect();
        let dpy: Vec<f64> = (0..ny).map(|y| (0..nx).map(|x| dp[x * ny + y]).sum()).collect();
        let mut log_term = 0.0;
        let mut norm_term = 0.0;
        for c in 0..nx * ny {
            let (x, y) = (c / ny, c % ny);
            log_term += dp[c] * l[c];
            norm_term += p[c] * (dp[c] / p[c] - dpx[x] / px[x] - dpy[y] / py[y]);
        }
        *g = log_term + norm_term;
    }
    grad
}

/// Largest of `|Σ ∂p|`, `|Σ_x ∂p(x)|`, `|Σ_y ∂p(y)|` over all parameters,
/// for a table `q` whose Jacobian is taken to be `q_c(δ − q_ab)`.
///
/// For a normalized table every residual is zero; an unnormalized table
/// leaves `q_ab(1 − Σq)`.
pub fn normalization_residual(q: &[f64], nx: usize, ny: usize) -> Result<f64> {
    if nx * ny != q.len() || q.is_empty() {
        return Err(Error::Dimension {
            expected: nx * ny,
            found: q.len(),
        });
    }
    let mut worst = 0.0f64;
    for ab in 0..q.len() {
        let dq: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(c, &qc)| qc * (f64::from(u8::from(c == ab)) - q[ab]))
            .collect();
        let sum_x: f64 = (0..nx).map(|x| dq[x * ny..(x + 1) * ny].iter().sum::<f64>()).sum();
        let sum_y: f64 = (0..ny).map(|y| (0..nx).map(|x| dq[x * ny + y]).sum::<f64>()).sum();
        worst = worst.max(sum_x.abs()).max(sum_y.abs());
    }
    Ok(worst)
}

/// Maximum normalization residual of a softmax joint.
pub fn check_normalization_cancellation(j: &DiscreteJoint) -> f64 {
    normalization_residual(&j.probs(), j.nx, j.ny).expect("joint table is well-formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherCheck {
    /// Mean over replications of the squared `N`-sample gradient mean.
    pub empirical: f64,
    /// `μ² + σ²/N`.
    pub predicted: f64,
    /// Monte-Carlo standard error of `empirical`.
    pub std_error: f64,
}

pub const FISHER_REPLICATIONS: usize = 100_000;

/// Monte-Carlo estimate of `E[(mean of N draws of g ~ N(μ, σ²))²]`.
pub fn fisher_expectation_check(n: usize, mu: f64, sigma: f64, seed: u64) -> Result<FisherCheck> {
    if n == 0 {
        return Err(Error::EmptyData("fisher sample count"));
    }
    if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(Error::Config(format!(
            "need finite mu and sigma >= 0, got {mu}, {sigma}"
        )));
    }
    let predicted = mu * mu + sigma * sigma / n as f64;
    if sigma == 0.0 {
        // Every draw equals μ, so every squared mean is μ².
        return Ok(FisherCheck {
            empirical: mu * mu,
            predicted,
            std_error: 0.0,
        });
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut r = rng::Rng::seed_from_u64(rng::derive_seed(seed, &[rng::tag("fisher-mc"), n as u64]));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..FISHER_REPLICATIONS {
        let m = (0..n).map(|_| normal.sample(&mut r)).sum::<f64>() / n as f64;
        let f = m * m;
        sum += f;
        sum_sq += f * f;
    }
    let reps = FISHER_REPLICATIONS as f64;
    let empirical = sum / reps;
    let var = (sum_sq / reps - empirical * empirical).max(0.0) * reps / (reps - 1.0);
    Ok(FisherCheck {
        empirical,
        predicted,
        std_error: (var / reps).sqrt(),
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// The two parts of `∇ log p(y|x)`: the joint term `∂p(x,y)/p(x,y)` and
/// the marginal term `−∂p(x)/p(x)`, each over all logits.
pub fn ce_gradient_decomposition(j: &DiscreteJoint, x: usize, y: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    j.check_cell(x, y)?;
    let p = j.probs();
    let px = j.px()[x];
    let target = x * j.ny + y;
    let joint = p
        .iter()
        .enumerate()
        .map(|(ab, &q)| f64::from(u8::from(ab == target)) - q)
        .collect();
    let marginal = p
        .iter()
        .enumerate()
        .map(|(ab, &q)| if ab / j.ny == x { q - q / px } else { q })
        .collect();
    Ok((joint, marginal))
}

/// Central finite differences of `f` over the logits of `j`.
pub fn finite_difference(j: &DiscreteJoint, h: f64, f: impl Fn(&DiscreteJoint) -> f64) -> Vec<f64> {
    (0..j.logits.len())
        .map(|i| {
            let v = j.logits[i];
            (f(&j.with_logit(i, v + h)) - f(&j.with_logit(i, v - h))) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub threshold: f64,
}

impl OracleCheck {
    fn below(name: &str, observed: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: observed < threshold,
            observed,
            threshold,
        }
    }

    fn above(name: &str, observed: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: observed > threshold,
            observed,
            threshold,
        }
    }
}

/// Random joints of every size from 1×2 up to 8×8, `trials` in total.
pub fn random_joints(trials: usize, seed: u64) -> Vec<DiscreteJoint> {
    (0..trials)
        .map(|t| {
            let nx = 1 + t % 8;
            let ny = 2 + (t / 8) % 7;
            DiscreteJoint::random(nx, ny, rng::derive_seed(seed, &[t as u64])).expect("valid size")
        })
        .collect()
}

/// MI-gradient identity over `trials` random joints.
pub fn check_mi_gradient(trials: usize, seed: u64) -> Vec<OracleCheck> {
    let mut fd_err = 0.0f64;
    let mut full_err = 0.0f64;
    for j in random_joints(trials, seed) {
        let g = mi_gradient_simplified(&j);
        fd_err = fd_err.max(max_abs_diff(&g, &finite_difference(&j, 1e-6, exact_mi)));
        full_err = full_err.max(max_abs_diff(&g, &mi_gradient_full(&j)));
    }
    vec![
        OracleCheck::below("mi_gradient_vs_finite_difference", fd_err, 1e-6),
        OracleCheck::below("mi_gradient_vs_full_expansion", full_err, 1e-10),
    ]
}

/// Normalization residuals over random joints plus a corrupted control.
pub fn check_normalization(trials: usize, seed: u64) -> Vec<OracleCheck> {
    let worst = random_joints(trials, seed)
        .iter()
        .map(check_normalization_cancellation)
        .fold(0.0, f64::max);
    let mut q = DiscreteJoint::random(4, 4, seed).expect("valid size").probs();
    q[5] += 0.1;
    let control = normalization_residual(&q, 4, 4).expect("well-formed");
    vec![
        OracleCheck::below("normalization_residual", worst, 1e-12),
        OracleCheck::above("normalization_negative_control", control, 1e-3),
    ]
}

/// Fisher expectation over `{0,1}×{0.5,1}×{5,10,20,40}` and the `1/N` slope.
pub fn check_fisher(seed: u64) -> Vec<OracleCheck> {
    let ns = [5usize, 10, 20, 40];
    let mut worst_z = 0.0f64;
    for mu in [0.0, 1.0] {
        for sigma in [0.5, 1.0] {
            for &n in &ns {
                let c = fisher_expectation_check(n, mu, sigma, seed).expect("valid grid point");
                worst_z = worst_z.max((c.empirical - c.predicted).abs() / c.std_error);
            }
        }
    }
    let excess: Vec<f64> = ns
        .iter()
        .map(|&n| fisher_expectation_check(n, 0.0, 1.0, seed).expect("valid").empirical)
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&xs, &excess);
    vec![
        OracleCheck::below("fisher_expectation_max_z", worst_z, 3.0),
        OracleCheck::below("fisher_slope_deviation", (slope + 1.0).abs(), 0.1),
    ]
}

/// The full oracle suite.
pub fn run_suite(seed: u64) -> Vec<OracleCheck> {
    let mut out = check_mi_gradient(100, seed);
    out.extend(check_normalization(100, seed));
    out.extend(check_fisher(seed));
    out
}

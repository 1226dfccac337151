//! Soft-margin SVM on an explicit Laplacian-RBF feature map, and the δ-sweep
//! of margin statistics against test error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{classification_error, dot, MarginBatch};
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_C: f64 = 100.0;
/// Stop once the maximal violating pair gap falls below this.
pub const KKT_TOLERANCE: f64 = 1e-3;
/// Maximum number of pair updates.
pub const MAX_ITERATIONS: usize = 100_000;
const TAU: f64 = 1e-12;
const DEGENERATE_NORM: f64 = 1e-12;

/// Centers and δ for `φ(x)_i = exp(−δ‖x − x_i‖)`.
#[derive(Debug, Clone)]
pub struct RbfConfig<'a> {
    pub delta: f64,
    pub centers: &'a [Vec<f64>],
}

impl<'a> RbfConfig<'a> {
    pub fn new(delta: f64, centers: &'a [Vec<f64>]) -> Result<Self> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(Error::InvalidArgument(format!("δ must be finite and ≥ 0, got {delta}")));
        }
        Ok(RbfConfig { delta, centers })
    }

    pub fn dim(&self) -> usize {
        self.centers.len()
    }
}

pub fn rbf_features(x: &[f64], cfg: &RbfConfig<'_>) -> Vec<f64> {
    cfg.centers
        .iter()
        .map(|c| {
            let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            (-cfg.delta * d2.sqrt()).exp()
        })
        .collect()
}

/// Feature matrix, one row per input.
pub fn rbf_feature_matrix(xs: &[Vec<f64>], cfg: &RbfConfig<'_>) -> Tensor {
    let m = cfg.dim();
    let data = xs.iter().flat_map(|x| rbf_features(x, cfg)).collect();
    Tensor::new([xs.len(), m], data).expect("row lengths match")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    pub alpha: Vec<f64>,
    pub c: f64,
    pub b: f64,
    pub w: Vec<f64>,
    pub support: Vec<usize>,
    pub iterations: usize,
    /// Final maximal-violating-pair gap.
    pub kkt_gap: f64,
}

impl SvmModel {
    pub fn w_norm(&self) -> f64 {
        dot(&self.w, &self.w).sqrt()
    }

    /// `2/‖w‖`.
    pub fn geometric_margin(&self) -> f64 {
        2.0 / self.w_norm()
    }

    pub fn decision(&self, phi: &[f64]) -> f64 {
        dot(&self.w, phi) + self.b
    }

    /// `Σ y_i α_i ⟨φ_i, φ⟩ + b`.
    pub fn dual_decision(&self, features: &Tensor, labels: &[f64], phi: &[f64]) -> f64 {
        self.support
            .iter()
            .map(|&i| labels[i] * self.alpha[i] * dot(features.row(i), phi))
            .sum::<f64>()
            + self.b
    }
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidArgument(format!("labels must be ±1, got {y}")));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::InvalidArgument("labels must contain both classes".into()));
    }
    Ok(())
}

fn in_up(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

fn in_low(y: f64, a: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

/// Soft-margin dual by SMO with maximal-violating-pair selection over the
/// linear kernel of `features` (`m×d`).
pub fn train_svm(features: &Tensor, labels: &[f64], c: f64) -> Result<SvmModel> {
    let (m, d) = features.dims2()?;
    if labels.len() != m {
        return Err(Error::shape(
            "train_svm",
            format!("{m} feature rows vs {} labels", labels.len()),
        ));
    }
    if c.is_nan() || c <= 0.0 {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    check_labels(labels)?;

    let mut kernel = vec![0.0; m * m];
    gemm(m, d, m, features.data(), false, features.data(), true, &mut kernel, 0.0);
    let k = |i: usize, j: usize| kernel[i * m + j];
    let mut alpha = vec![0.0; m];
    // gradient of ½αᵀQα − 1ᵀα with Q_ij = y_i y_j K_ij
    let mut grad = vec![-1.0; m];
    let mut iterations = 0;
    let gap = loop {
        let (mut i, mut big_m) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut small_m) = (usize::MAX, f64::INFINITY);
        for t in 0..m {
            let v = -labels[t] * grad[t];
            if in_up(labels[t], alpha[t], c) && v > big_m {
                big_m = v;
                i = t;
            }
            if in_low(labels[t], alpha[t], c) && v < small_m {
                small_m = v;
                j = t;
            }
        }
        let gap = big_m - small_m;
        if i == usize::MAX || j == usize::MAX || gap < KKT_TOLERANCE {
            break gap.max(0.0);
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::NotConverged {
                iterations,
                max_violation: gap,
            });
        }
        iterations += 1;

        let (yi, yj) = (labels[i], labels[j]);
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let qij = yi * yj * k(i, j);
        if yi != yj {
            let quad = (k(i, i) + k(j, j) + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k(i, i) + k(j, j) - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - ai_old, alpha[j] - aj_old);
        for t in 0..m {
            let yt = labels[t];
            grad[t] += yt * (yi * k(t, i) * dai + yj * k(t, j) * daj);
        }
    };

    // bias: average over free vectors, else midpoint of the feasible range
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..m {
        let yg = labels[t] * grad[t];
        let (y, a) = (labels[t], alpha[t]);
        if a >= c {
            if y < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if a <= 0.0 {
            if y > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };

    let mut w = vec![0.0; d];
    let support: Vec<usize> = (0..m).filter(|&t| alpha[t] > 0.0).collect();
    for &t in &support {
        let s = labels[t] * alpha[t];
        for (wj, &f) in w.iter_mut().zip(features.row(t)) {
            *wj += s * f;
        }
    }
    Ok(SvmModel {
        alpha,
        c,
        b: -rho,
        w,
        support,
        iterations,
        kkt_gap: gap,
    })
}

/// Largest KKT violation: the maximal-violating-pair gap, clamped at 0.
pub fn kkt_violation(model: &SvmModel, features: &Tensor, labels: &[f64]) -> Result<f64> {
    let (m, _) = features.dims2()?;
    let outputs: Vec<f64> = (0..m).map(|t| dot(&model.w, features.row(t))).collect();
    let (mut big_m, mut small_m) = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..m {
        // −y_t ∇_t = −y_t (y_t w·φ_t − 1) = y_t − w·φ_t
        let v = labels[t] - outputs[t];
        if in_up(labels[t], model.alpha[t], model.c) {
            big_m = big_m.max(v);
        }
        if in_low(labels[t], model.alpha[t], model.c) {
            small_m = small_m.min(v);
        }
    }
    Ok((big_m - small_m).max(0.0))
}

/// A labelled two-class sample; labels are ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoClassSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TwoClassSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Parameters of the two-class Gaussian-mixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub dim: usize,
    pub components: usize,
    /// Standard deviation of component centers around the origin.
    pub center_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            dim: 10,
            components: 3,
            center_spread: 1.0,
            noise: 1.0,
            seed: 7,
        }
    }
}

/// Draws train and test sets from the same pair of class-conditional
/// Gaussian mixtures; classes alternate so both sets are balanced.
pub fn gaussian_mixtures(cfg: &MixtureConfig, n_train: usize, n_test: usize) -> Result<(TwoClassSet, TwoClassSet)> {
    if cfg.dim == 0 || cfg.components == 0 || n_train < 2 {
        return Err(Error::InvalidArgument(
            "mixture needs dim ≥ 1, components ≥ 1 and at least 2 training points".into(),
        ));
    }
    let spread = Normal::new(0.0, cfg.center_spread)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..cfg.components)
                .map(|_| (0..cfg.dim).map(|_| spread.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mut draw = |n: usize| {
        let mut set = TwoClassSet {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
        };
        for i in 0..n {
            let class = i % 2;
            let comp = &centers[class][rng.random_range(0..cfg.components)];
            set.x.push(comp.iter().map(|c| c + noise.sample(&mut rng)).collect());
            set.y.push(if class == 0 { 1.0 } else { -1.0 });
        }
        set
    };
    let train = draw(n_train);
    let test = draw(n_test);
    Ok((train, test))
}

/// One δ of the sweep. Statistics are `None` for degenerate solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub test_error: Option<f64>,
    pub geom_margin: Option<f64>,
    pub mean_margin: Option<f64>,
    pub variance: Option<f64>,
    pub nmv: Option<f64>,
    pub degenerate: bool,
}

/// Log-spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(Error::InvalidArgument(format!("bad grid {lo}..{hi} ({n})")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect())
}

pub fn default_delta_grid() -> Vec<f64> {
    log_grid(1e-3, 10.0, 13).expect("static grid")
}

/// Trained model plus train margins (`y(wᵀφ+b)/‖w‖`) and test margins.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub delta: f64,
    pub model: SvmModel,
    pub train_margins: Vec<f64>,
    pub test_margins: Vec<f64>,
}

impl SweepCell {
    pub fn row(&self) -> Result<SweepRow> {
        let norm = self.model.w_norm();
        if norm < DEGENERATE_NORM {
            return Ok(SweepRow {
                delta: self.delta,
                test_error: None,
                geom_margin: None,
                mean_margin: None,
                variance: None,
                nmv: None,
                degenerate: true,
            });
        }
        let stats = MarginBatch::from_margins(self.train_margins.clone())?;
        Ok(SweepRow {
            delta: self.delta,
            test_error: Some(classification_error(&self.test_margins)?),
            geom_margin: Some(self.model.geometric_margin()),
            mean_margin: Some(stats.mu),
            variance: Some(stats.sigma),
            nmv: Some(stats.sigma_bar),
            degenerate: false,
        })
    }
}

pub fn sweep_cell(delta: f64, train: &TwoClassSet, test: &TwoClassSet, c: f64) -> Result<SweepCell> {
    let cfg = RbfConfig::new(delta, &train.x)?;
    let phi_train = rbf_feature_matrix(&train.x, &cfg);
    let model = train_svm(&phi_train, &train.y, c)?;
    let norm = model.w_norm();
    let unit = |phi: &[f64], y: f64| {
        if norm < DEGENERATE_NORM {
            0.0
        } else {
            y * model.decision(phi) / norm
        }
    };
    let train_margins = (0..train.len())
        .map(|i| unit(phi_train.row(i), train.y[i]))
        .collect();
    let test_margins = test
        .x
        .iter()
        .zip(&test.y)
        .map(|(x, &y)| unit(&rbf_features(x, &cfg), y))
        .collect();
    Ok(SweepCell {
        delta,
        model,
        train_margins,
        test_margins,
    })
}

/// One row per δ, computed in parallel; results do not depend on the
/// thread count.
pub fn sweep(deltas: &[f64], train: &TwoClassSet, test: &TwoClassSet, c: f64) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("empty δ grid".into()));
    }
    deltas
        .par_iter()
        .map(|&d| sweep_cell(d, train, test, c)?.row())
        .collect()
}

/// Qualitative shape of the sweep: whether the geometric margin increases
/// over the upper half of the grid, and whether the NMV minimizer sits
/// closer in log δ to the error minimizer than the margin maximizer does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepShape {
    pub margin_increasing_tail: bool,
    pub delta_min_error: f64,
    pub delta_min_nmv: f64,
    pub delta_max_margin: f64,
    pub nmv_closer: bool,
}

pub fn sweep_shape(rows: &[SweepRow]) -> Option<SweepShape> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| !r.degenerate).collect();
    if ok.len() < 2 {
        return None;
    }
    let pick = |f: &dyn Fn(&SweepRow) -> f64, min: bool| {
        ok.iter()
            .copied()
            .reduce(|a, b| {
                let (fa, fb) = (f(a), f(b));
                if (min && fb < fa) || (!min && fb > fa) {
                    b
                } else {
                    a
                }
            })
            .map(|r| r.delta)
            .unwrap()
    };
    let delta_min_error = pick(&|r| r.test_error.unwrap(), true);
    let delta_min_nmv = pick(&|r| r.nmv.unwrap(), true);
    let delta_max_margin = pick(&|r| r.geom_margin.unwrap(), false);
    let tail = &ok[ok.len() / 2..];
    let margin_increasing_tail = tail
        .windows(2)
        .all(|w| w[1].geom_margin.unwrap() >= w[0].geom_margin.unwrap());
    let dist = |a: f64, b: f64| (a.ln() - b.ln()).abs();
    Some(SweepShape {
        margin_increasing_tail,
        delta_min_error,
        delta_min_nmv,
        delta_max_margin,
        nmv_closer: dist(delta_min_nmv, delta_min_error) < dist(delta_max_margin, delta_min_error),
    })
}

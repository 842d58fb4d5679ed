//! Probabilistic output heads: independent Student-T, multivariate Student-T
//! with a lower-triangular scale, and the incremental quantile function, plus
//! their training losses and the sampling bridge to quantile-based metrics.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StudentT as StudentTDist};
use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::rng;
use crate::tensor::{Graph, Var};

pub const SCALE_EPS: f64 = 1e-6;

/// Decile levels used for quantile training and evaluation.
pub const QUANTILE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub const MC_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    StudentT,
    MvStudentT,
    Quantile,
}

impl HeadKind {
    /// Raw projection width per forecast step.
    pub fn params_per_step(self, d_y: usize) -> usize {
        match self {
            HeadKind::StudentT => 3 * d_y,
            HeadKind::MvStudentT => d_y + d_y * (d_y + 1) / 2 + 1,
            HeadKind::Quantile => QUANTILE_LEVELS.len() * d_y,
        }
    }
}

/// Constrained head parameters as graph nodes.
pub enum HeadOutput {
    /// Each tensor `B x H x d_y`.
    StudentT { loc: Var, scale: Var, df: Var },
    /// `loc: B x H x d_y`, `tril: B x H x d_y(d_y+1)/2` packed row-major with
    /// a softplus-positive diagonal, `df: B x H x 1` shared across dims.
    MvStudentT { loc: Var, tril: Var, df: Var },
    /// `B x H x d_y x K`, nondecreasing along K by construction.
    Quantile { quantiles: Var },
}

/// Apply the head's constraint map to raw projections `B x H x p`.
pub fn project_head<E: Elem>(
    g: &mut Graph<E>,
    raw: Var,
    kind: HeadKind,
    d_y: usize,
) -> HeadOutput {
    let eps = E::from_f64(SCALE_EPS);
    match kind {
        HeadKind::StudentT => {
            let loc = g.narrow(raw, 2, 0, d_y);
            let s_raw = g.narrow(raw, 2, d_y, d_y);
            let sp = g.softplus(s_raw);
            let scale = g.add_scalar(sp, eps);
            let n_raw = g.narrow(raw, 2, 2 * d_y, d_y);
            let sp = g.softplus(n_raw);
            let df = g.add_scalar(sp, E::from_f64(2.0));
            HeadOutput::StudentT { loc, scale, df }
        }
        HeadKind::MvStudentT => {
            let tri = d_y * (d_y + 1) / 2;
            let loc = g.narrow(raw, 2, 0, d_y);
            // softplus the diagonal entries of the packed triangle, pass the
            // rest through
            let mut parts = Vec::with_capacity(tri);
            let mut idx = 0;
            for i in 0..d_y {
                for j in 0..=i {
                    let e = g.narrow(raw, 2, d_y + idx, 1);
                    parts.push(if i == j {
                        let sp = g.softplus(e);
                        g.add_scalar(sp, eps)
                    } else {
                        e
                    });
                    idx += 1;
                    let _ = j;
                }
            }
            let tril = g.concat(&parts, 2);
            let n_raw = g.narrow(raw, 2, d_y + tri, 1);
            let sp = g.softplus(n_raw);
            let df = g.add_scalar(sp, E::from_f64(2.0));
            HeadOutput::MvStudentT { loc, tril, df }
        }
        HeadKind::Quantile => {
            let k = QUANTILE_LEVELS.len();
            let shape = g.shape(raw).to_vec();
            let (b, h) = (shape[0], shape[1]);
            let r = g.reshape(raw, vec![b, h, d_y, k]);
            let base = g.narrow(r, 3, 0, 1);
            let inc_raw = g.narrow(r, 3, 1, k - 1);
            let inc = g.softplus(inc_raw);
            let packed = g.concat(&[base, inc], 3);
            let quantiles = g.cumsum_last(packed);
            HeadOutput::Quantile { quantiles }
        }
    }
}

/// Mean negative log-likelihood of an independent Student-T head.
pub fn nll_student_t<E: Elem>(g: &mut Graph<E>, loc: Var, scale: Var, df: Var, y: Var) -> Var {
    let half = E::from_f64(0.5);
    let diff = g.sub(y, loc);
    let z = g.div(diff, scale);
    let z2 = g.mul(z, z);
    let ratio = g.div(z2, df);
    let log1p = g.ln1p(ratio);
    let nu_p1 = g.add_scalar(df, E::ONE);
    let half_nu_p1 = g.mul_scalar(nu_p1, half);
    let tail = g.mul(half_nu_p1, log1p);
    let lg_top = g.lgamma(half_nu_p1);
    let half_nu = g.mul_scalar(df, half);
    let lg_bot = g.lgamma(half_nu);
    let ln_nu_pi = {
        let pi_nu = g.mul_scalar(df, E::from_f64(std::f64::consts::PI));
        let l = g.ln(pi_nu);
        g.mul_scalar(l, half)
    };
    let ln_scale = g.ln(scale);
    // -log pdf = -lgamma((nu+1)/2) + lgamma(nu/2) + 0.5 ln(nu pi) + ln sigma
    //            + (nu+1)/2 ln(1 + z^2/nu)
    let a = g.sub(lg_bot, lg_top);
    let b = g.add(a, ln_nu_pi);
    let c = g.add(b, ln_scale);
    let nll = g.add(c, tail);
    g.mean_all(nll)
}

/// Mean negative log-likelihood of the multivariate Student-T head. The
/// whitening solve against the lower-triangular scale is unrolled over `d_y`.
pub fn nll_mv_student_t<E: Elem>(
    g: &mut Graph<E>,
    loc: Var,
    tril: Var,
    df: Var,
    y: Var,
    d_y: usize,
) -> Var {
    let half = E::from_f64(0.5);
    let d = E::from_f64(d_y as f64);
    // forward substitution: z_i = (y_i - mu_i - sum_{j<i} L_ij z_j) / L_ii
    let mut z: Vec<Var> = Vec::with_capacity(d_y);
    let mut log_det: Option<Var> = None;
    let mut idx = 0;
    for i in 0..d_y {
        let yi = g.narrow(y, 2, i, 1);
        let mi = g.narrow(loc, 2, i, 1);
        let mut acc = g.sub(yi, mi);
        for zj in z.iter().take(i) {
            let lij = g.narrow(tril, 2, idx, 1);
            let prod = g.mul(lij, *zj);
            acc = g.sub(acc, prod);
            idx += 1;
        }
        let lii = g.narrow(tril, 2, idx, 1);
        idx += 1;
        let zi = g.div(acc, lii);
        z.push(zi);
        let ln_lii = g.ln(lii);
        log_det = Some(match log_det {
            Some(a) => g.add(a, ln_lii),
            None => ln_lii,
        });
    }
    let mut z2: Option<Var> = None;
    for zi in &z {
        let sq = g.mul(*zi, *zi);
        z2 = Some(match z2 {
            Some(a) => g.add(a, sq),
            None => sq,
        });
    }
    let z2 = z2.expect("d_y >= 1");
    let log_det = log_det.expect("d_y >= 1");

    let ratio = g.div(z2, df);
    let log1p = g.ln1p(ratio);
    let nu_pd = g.add_scalar(df, d);
    let half_nu_pd = g.mul_scalar(nu_pd, half);
    let tail = g.mul(half_nu_pd, log1p);
    let lg_top = g.lgamma(half_nu_pd);
    let half_nu = g.mul_scalar(df, half);
    let lg_bot = g.lgamma(half_nu);
    let ln_nu_pi = {
        let pi_nu = g.mul_scalar(df, E::from_f64(std::f64::consts::PI));
        let l = g.ln(pi_nu);
        g.mul_scalar(l, E::from_f64(d_y as f64 / 2.0))
    };
    let a = g.sub(lg_bot, lg_top);
    let b = g.add(a, ln_nu_pi);
    let c = g.add(b, log_det);
    let nll = g.add(c, tail);
    g.mean_all(nll)
}

/// Mean pinball loss over the decile levels.
pub fn quantile_loss_train<E: Elem>(g: &mut Graph<E>, quantiles: Var, y: Var) -> Var {
    let k = QUANTILE_LEVELS.len();
    let shape = g.shape(y).to_vec();
    let mut y_shape = shape.clone();
    y_shape.push(1);
    let yk = g.reshape(y, y_shape);
    let diff = g.sub(yk, quantiles); // y - q, broadcast over K
    let alpha: Vec<E> = QUANTILE_LEVELS.iter().map(|&a| E::from_f64(a)).collect();
    let alpha_m1: Vec<E> = QUANTILE_LEVELS.iter().map(|&a| E::from_f64(a - 1.0)).collect();
    let alpha = g.constant(alpha, vec![k]);
    let alpha_m1 = g.constant(alpha_m1, vec![k]);
    let lo = g.mul(alpha, diff);
    let hi = g.mul(alpha_m1, diff);
    let pin = g.maximum(lo, hi);
    g.mean_all(pin)
}

/// Dispatch the training loss for a head output against normalized targets
/// `B x H x d_y`.
pub fn head_loss<E: Elem>(g: &mut Graph<E>, out: &HeadOutput, y: Var, d_y: usize) -> Var {
    match out {
        HeadOutput::StudentT { loc, scale, df } => nll_student_t(g, *loc, *scale, *df, y),
        HeadOutput::MvStudentT { loc, tril, df } => {
            nll_mv_student_t(g, *loc, *tril, *df, y, d_y)
        }
        HeadOutput::Quantile { quantiles } => quantile_loss_train(g, *quantiles, y),
    }
}

/// Concrete forecast distribution detached from the graph. All tensors are
/// flattened row-major with `dims = [B, H, d_y]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ForecastDistribution {
    Normal {
        mean: Vec<f32>,
        std: Vec<f32>,
        dims: [usize; 3],
    },
    StudentT {
        loc: Vec<f32>,
        scale: Vec<f32>,
        df: Vec<f32>,
        dims: [usize; 3],
    },
    MvStudentT {
        loc: Vec<f32>,
        /// `B x H x d_y(d_y+1)/2`
        tril: Vec<f32>,
        /// `B x H`
        df: Vec<f32>,
        dims: [usize; 3],
    },
    Quantile {
        levels: Vec<f64>,
        /// `B x H x d_y x K`
        values: Vec<f32>,
        dims: [usize; 3],
    },
}

impl HeadOutput {
    /// Read the graph values into a runtime distribution.
    pub fn to_distribution<E: Elem>(&self, g: &Graph<E>, dims: [usize; 3]) -> ForecastDistribution {
        let take = |v: Var| -> Vec<f32> { g.value(v).iter().map(|x| x.to_f64() as f32).collect() };
        match self {
            HeadOutput::StudentT { loc, scale, df } => ForecastDistribution::StudentT {
                loc: take(*loc),
                scale: take(*scale),
                df: take(*df),
                dims,
            },
            HeadOutput::MvStudentT { loc, tril, df } => ForecastDistribution::MvStudentT {
                loc: take(*loc),
                tril: take(*tril),
                df: take(*df),
                dims,
            },
            HeadOutput::Quantile { quantiles } => ForecastDistribution::Quantile {
                levels: QUANTILE_LEVELS.to_vec(),
                values: take(*quantiles),
                dims,
            },
        }
    }
}

impl ForecastDistribution {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            ForecastDistribution::Normal { dims, .. }
            | ForecastDistribution::StudentT { dims, .. }
            | ForecastDistribution::MvStudentT { dims, .. }
            | ForecastDistribution::Quantile { dims, .. } => *dims,
        }
    }

    /// Distribution mean per position, `B x H x d_y` (median for the
    /// quantile head).
    pub fn mean(&self) -> Vec<f32> {
        match self {
            ForecastDistribution::Normal { mean, .. } => mean.clone(),
            ForecastDistribution::StudentT { loc, .. }
            | ForecastDistribution::MvStudentT { loc, .. } => loc.clone(),
            ForecastDistribution::Quantile { levels, values, dims } => {
                let k = levels.len();
                let mid = levels
                    .iter()
                    .position(|&l| (l - 0.5).abs() < 1e-9)
                    .unwrap_or(k / 2);
                let n = dims[0] * dims[1] * dims[2];
                (0..n).map(|i| values[i * k + mid]).collect()
            }
        }
    }
}

/// Undo instance normalization: affine-map the distribution per batch slot
/// and target dim. `stats` has one entry per batch element.
pub fn unnormalize_forecast(
    dist: &ForecastDistribution,
    stats: &[NormStats],
) -> ForecastDistribution {
    let [b, h, d_y] = dist.dims();
    assert_eq!(stats.len(), b, "one NormStats per batch element");
    let affine = |vals: &[f32], scale_only: bool| -> Vec<f32> {
        let mut out = vals.to_vec();
        for bi in 0..b {
            for hi in 0..h {
                for k in 0..d_y {
                    let v = &mut out[(bi * h + hi) * d_y + k];
                    *v *= stats[bi].scale[k];
                    if !scale_only {
                        *v += stats[bi].loc[k];
                    }
                }
            }
        }
        out
    };
    match dist {
        ForecastDistribution::Normal { mean, std, dims } => ForecastDistribution::Normal {
            mean: affine(mean, false),
            std: affine(std, true),
            dims: *dims,
        },
        ForecastDistribution::StudentT { loc, scale, df, dims } => {
            ForecastDistribution::StudentT {
                loc: affine(loc, false),
                scale: affine(scale, true),
                df: df.clone(),
                dims: *dims,
            }
        }
        ForecastDistribution::MvStudentT { loc, tril, df, dims } => {
            // scaling dim i by s_i maps L to diag(s) L: row i scales by s_i
            let tri = d_y * (d_y + 1) / 2;
            let mut new_tril = tril.clone();
            for bi in 0..b {
                for hi in 0..h {
                    let base = (bi * h + hi) * tri;
                    let mut idx = 0;
                    for i in 0..d_y {
                        for _j in 0..=i {
                            new_tril[base + idx] *= stats[bi].scale[i];
                            idx += 1;
                        }
                    }
                }
            }
            ForecastDistribution::MvStudentT {
                loc: affine(loc, false),
                tril: new_tril,
                df: df.clone(),
                dims: *dims,
            }
        }
        ForecastDistribution::Quantile { levels, values, dims } => {
            let k = levels.len();
            let mut out = values.clone();
            for bi in 0..b {
                for hi in 0..h {
                    for di in 0..d_y {
                        for ki in 0..k {
                            let v = &mut out[((bi * h + hi) * d_y + di) * k + ki];
                            *v = *v * stats[bi].scale[di] + stats[bi].loc[di];
                        }
                    }
                }
            }
            ForecastDistribution::Quantile {
                levels: levels.clone(),
                values: out,
                dims: *dims,
            }
        }
    }
}

fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi.min(n - 1)] * w
}

/// Draw `n_samples` joint sample paths, `S x B x H x d_y` flattened.
pub fn sample_forecast(
    dist: &ForecastDistribution,
    n_samples: usize,
    seed: u64,
) -> Vec<f32> {
    let [b, h, d_y] = dist.dims();
    let n = b * h * d_y;
    let mut out = vec![0.0f32; n_samples * n];
    match dist {
        ForecastDistribution::Normal { mean, std, .. } => {
            for i in 0..n {
                let mut r = rng::stream(seed, 2, i as u64);
                let d = Normal::new(mean[i] as f64, (std[i] as f64).max(0.0).max(1e-12)).unwrap();
                for s in 0..n_samples {
                    out[s * n + i] = d.sample(&mut r) as f32;
                }
            }
        }
        ForecastDistribution::StudentT { loc, scale, df, .. } => {
            for i in 0..n {
                let mut r = rng::stream(seed, 2, i as u64);
                let d = StudentTDist::new(df[i] as f64).unwrap();
                for s in 0..n_samples {
                    out[s * n + i] = (loc[i] as f64 + scale[i] as f64 * d.sample(&mut r)) as f32;
                }
            }
        }
        ForecastDistribution::MvStudentT { loc, tril, df, .. } => {
            let tri = d_y * (d_y + 1) / 2;
            let std_norm = Normal::new(0.0, 1.0).unwrap();
            for bi in 0..b {
                for hi in 0..h {
                    let p = bi * h + hi;
                    let mut r = rng::stream(seed, 2, p as u64);
                    let nu = df[p] as f64;
                    let chi = ChiSquared::new(nu).unwrap();
                    for s in 0..n_samples {
                        let z: Vec<f64> = (0..d_y).map(|_| std_norm.sample(&mut r)).collect();
                        let w: f64 = chi.sample(&mut r);
                        let t_scale = (nu / w).sqrt();
                        let mut idx = 0;
                        for i in 0..d_y {
                            let mut v = loc[p * d_y + i] as f64;
                            for zj in z.iter().take(i + 1) {
                                v += tril[p * tri + idx] as f64 * zj * t_scale;
                                idx += 1;
                            }
                            out[s * n + p * d_y + i] = v as f32;
                        }
                    }
                }
            }
        }
        ForecastDistribution::Quantile { levels, values, .. } => {
            // inverse-CDF sampling by linear interpolation between stored
            // quantiles, clamped at the ends
            let k = levels.len();
            for i in 0..n {
                let mut r = rng::stream(seed, 2, i as u64);
                let q = &values[i * k..(i + 1) * k];
                for s in 0..n_samples {
                    let u: f64 = r.gen_range(0.0..1.0);
                    let v = if u <= levels[0] {
                        q[0] as f64
                    } else if u >= levels[k - 1] {
                        q[k - 1] as f64
                    } else {
                        let j = levels.partition_point(|&l| l < u) - 1;
                        let w = (u - levels[j]) / (levels[j + 1] - levels[j]);
                        q[j] as f64 * (1.0 - w) + q[j + 1] as f64 * w
                    };
                    out[s * n + i] = v as f32;
                }
            }
        }
    }
    out
}

/// Marginal predictive quantiles, `B x H x d_y x levels.len()`. Parametric
/// heads use seeded Monte Carlo; the quantile head interpolates its stored
/// levels directly.
pub fn predictive_quantiles(
    dist: &ForecastDistribution,
    levels: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let [b, h, d_y] = dist.dims();
    let n = b * h * d_y;
    if let ForecastDistribution::Quantile { levels: have, values, .. } = dist {
        let k = have.len();
        let mut out = vec![0.0f32; n * levels.len()];
        for i in 0..n {
            let q = &values[i * k..(i + 1) * k];
            for (li, &lvl) in levels.iter().enumerate() {
                out[i * levels.len() + li] = if lvl <= have[0] {
                    q[0]
                } else if lvl >= have[k - 1] {
                    q[k - 1]
                } else {
                    let j = have.partition_point(|&l| l < lvl) - 1;
                    let w = ((lvl - have[j]) / (have[j + 1] - have[j])) as f32;
                    q[j] * (1.0 - w) + q[j + 1] * w
                };
            }
        }
        return Ok(out);
    }
    if n_samples < 2 {
        return Err(Error::contract("predictive_quantiles needs >= 2 samples"));
    }
    let samples = sample_forecast(dist, n_samples, seed);
    let mut out = vec![0.0f32; n * levels.len()];
    let mut buf = vec![0.0f64; n_samples];
    for i in 0..n {
        for s in 0..n_samples {
            buf[s] = samples[s * n + i] as f64;
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (li, &lvl) in levels.iter().enumerate() {
            out[i * levels.len() + li] = empirical_quantile(&buf, lvl) as f32;
        }
    }
    Ok(out)
}

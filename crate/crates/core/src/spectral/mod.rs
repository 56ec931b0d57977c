//! Spectral extraction: pick the delay order, an approximate Koopman matrix and
//! the real/complex eigenvalue split from time-delay data.
//!
//! For each candidate order the stacked Hankel matrix is denoised by a
//! nuclear-norm proximal / Hankel-projection loop, its rank is read off with a
//! Gavish–Donoho hard threshold, and a HAVOK regression on the leading delay
//! coordinates gives the operator. The order is the last one that still buys a
//! meaningful drop in held-out one-step residual.

mod hankel;

pub use hankel::{build_hankel, build_hankel_multi, denoise_lowrank, HankelMatrix};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::numcore::{eigenvalues, lstsq, singular_values, svd, Matrix, Svd};

/// How [`estimate_rank`] gets its noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseEstimate {
    /// Unknown noise, estimated from the median singular value.
    Median,
    /// Known per-entry noise standard deviation.
    Known(f64),
}

/// Number of singular values above the Gavish–Donoho optimal hard threshold.
/// Never returns 0.
pub fn estimate_rank(s: &[f64], shape: (usize, usize), noise: NoiseEstimate) -> usize {
    if s.is_empty() {
        return 1;
    }
    let (m, n) = (shape.0.min(shape.1) as f64, shape.0.max(shape.1) as f64);
    let beta = m / n;
    let tau = match noise {
        NoiseEstimate::Median => {
            let mut sorted = s.to_vec();
            sorted.sort_by(f64::total_cmp);
            let k = sorted.len();
            let median = if k % 2 == 1 {
                sorted[k / 2]
            } else {
                0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
            };
            let omega = 0.56 * beta.powi(3) - 0.95 * beta * beta + 1.82 * beta + 1.43;
            omega * median
        }
        NoiseEstimate::Known(sigma) => {
            let lam_star = (2.0 * (beta + 1.0)
                + 8.0 * beta / (beta + 1.0 + (beta * beta + 14.0 * beta + 1.0).sqrt()))
            .sqrt();
            lam_star * n.sqrt() * sigma
        }
    };
    // values at rounding level never count, whatever the noise estimate says
    let floor = s[0] * f64::EPSILON * n;
    let tau = tau.max(floor);
    s.iter().filter(|&&v| v > tau).count().max(1)
}

/// HAVOK regression result.
#[derive(Debug, Clone)]
pub struct Havok {
    /// Operator on the leading right-singular (delay) coordinates.
    pub koopman: Matrix,
    pub eigs: Vec<Complex64>,
    pub spectral_radius: f64,
    /// Truncated SVD of the Hankel matrix the regression ran on.
    pub basis: Svd,
    pub warning: Option<String>,
}

impl Havok {
    /// Advances every column (a delay vector) of `windows` by one step.
    pub fn predict(&self, windows: &Matrix) -> Matrix {
        let Svd { u, s, .. } = &self.basis;
        // v = Σ⁻¹Uᵀh,  h' = UΣKv
        let mut coords = u.transpose().matmul(windows);
        for (i, &sv) in s.iter().enumerate() {
            let inv = if sv > 0.0 { 1.0 / sv } else { 0.0 };
            coords.row_mut(i).iter_mut().for_each(|x| *x *= inv);
        }
        let mut next = self.koopman.matmul(&coords);
        for (i, &sv) in s.iter().enumerate() {
            next.row_mut(i).iter_mut().for_each(|x| *x *= sv);
        }
        u.matmul(&next)
    }
}

/// Truncates `h` to `rank` and regresses `v_{k+1} ≈ K v_k` over consecutive
/// windows of the same segment.
pub fn havok_koopman(h: &HankelMatrix, rank: usize) -> Result<Havok> {
    let max_rank = h.mat.rows().min(h.mat.cols());
    if rank == 0 || rank > max_rank {
        return Err(Error::Contract(format!(
            "havok rank must be in 1..={max_rank}, got {rank}"
        )));
    }
    if h.q < 2 {
        return Err(Error::Contract("havok needs at least two windows per segment".into()));
    }
    let full = svd(&h.mat)?;
    let numerical = full
        .s
        .iter()
        .filter(|&&v| v > full.s[0] * f64::EPSILON * max_rank.max(h.mat.cols()) as f64)
        .count();
    let warning = (rank > numerical).then(|| {
        format!("requested rank {rank} exceeds numerical rank {numerical}")
    });
    let basis = full.truncate(rank);

    let pairs = h.segments * (h.q - 1);
    let mut x = Matrix::zeros(pairs, rank);
    let mut y = Matrix::zeros(pairs, rank);
    let mut p = 0;
    for s in 0..h.segments {
        for j in 0..h.q - 1 {
            let c = s * h.q + j;
            for k in 0..rank {
                x[(p, k)] = basis.v[(c, k)];
                y[(p, k)] = basis.v[(c + 1, k)];
            }
            p += 1;
        }
    }
    // rows are samples, so this solves Xᵀ-side: x·Kᵀ ≈ y
    let koopman = lstsq(&x, &y)?.transpose();
    let eigs = eigenvalues(&koopman)?;
    let spectral_radius = eigs.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    Ok(Havok {
        koopman,
        eigs,
        spectral_radius,
        basis,
        warning,
    })
}

/// Real/complex split of a conjugate-closed eigenvalue list.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumClass {
    pub m_r: usize,
    pub m_c: usize,
    /// Sorted by descending modulus; each conjugate pair is adjacent with the
    /// positive-imaginary member first.
    pub target_eigs: Vec<Complex64>,
}

fn is_real(z: Complex64, tol_imag: f64) -> bool {
    z.im.abs() <= tol_imag * z.norm().max(1.0)
}

pub fn classify_spectrum(eigs: &[Complex64], tol_imag: f64) -> Result<SpectrumClass> {
    let mut reals = Vec::new();
    let mut complex = Vec::new();
    for &z in eigs {
        if is_real(z, tol_imag) {
            reals.push(z);
        } else {
            complex.push(z);
        }
    }
    let by_modulus = |a: &Complex64, b: &Complex64| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    };
    complex.sort_by(by_modulus);

    // greedy conjugate matching in modulus order
    let mut used = vec![false; complex.len()];
    let mut pairs: Vec<(Complex64, Complex64)> = Vec::new();
    for i in 0..complex.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let a = complex[i];
        let partner = (0..complex.len())
            .filter(|&j| !used[j] && complex[j].im * a.im < 0.0)
            .min_by(|&j, &k| {
                (complex[j] - a.conj())
                    .norm()
                    .total_cmp(&(complex[k] - a.conj()).norm())
            })
            .ok_or_else(|| {
                Error::numerical("classify_spectrum", format!("complex eigenvalue {a} has no conjugate partner"))
            })?;
        used[partner] = true;
        let b = complex[partner];
        pairs.push(if a.im > 0.0 { (a, b) } else { (b, a) });
    }

    let mut groups: Vec<Vec<Complex64>> = pairs.into_iter().map(|(a, b)| vec![a, b]).collect();
    groups.extend(reals.iter().map(|&z| vec![z]));
    groups.sort_by(|a, b| by_modulus(&a[0], &b[0]));
    Ok(SpectrumClass {
        m_r: reals.len(),
        m_c: eigs.len() - reals.len(),
        target_eigs: groups.into_iter().flatten().collect(),
    })
}

/// Knobs of the extraction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralOptions {
    pub r_max: usize,
    /// Minimum relative drop in held-out residual that justifies one more delay.
    pub tol_improve: f64,
    pub tol_imag: f64,
    /// Soft threshold as a fraction of the top singular value, per extra delay.
    pub lam_rel: f64,
    pub denoise_iters: usize,
    /// Windows per trajectory in the fitting Hankel matrix.
    pub windows: usize,
    /// Leading training trajectories used for extraction.
    pub subset: usize,
    /// Skip the order search and use this order.
    pub forced_order: Option<usize>,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            r_max: 5,
            tol_improve: 0.05,
            tol_imag: 1e-6,
            lam_rel: 0.005,
            denoise_iters: 20,
            windows: 128,
            subset: 32,
            forced_order: None,
        }
    }
}

/// Per-order diagnostics from the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCandidate {
    pub order: usize,
    pub rank: usize,
    pub lam: f64,
    pub residual: f64,
    pub m_r: usize,
    pub m_c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

mod complex_list {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|z| [z.re, z.im]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        let raw: Vec<[f64; 2]> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|[re, im]| Complex64::new(re, im)).collect())
    }
}

fn default_tol_imag() -> f64 {
    SpectralOptions::default().tol_imag
}

/// Everything downstream needs from the extraction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub order_r: usize,
    pub m_r: usize,
    pub m_c: usize,
    pub latent_dim: usize,
    pub state_dim: usize,
    pub dt: f64,
    /// Discrete-time eigenvalues as `[re, im]`; empty for manual configurations.
    #[serde(with = "complex_list")]
    pub target_eigs: Vec<Complex64>,
    pub koopman_init: Matrix,
    pub singular_values: Vec<f64>,
    /// Relative imaginary-part tolerance that decided which targets are real.
    #[serde(default = "default_tol_imag")]
    pub tol_imag: f64,
    #[serde(default)]
    pub candidates: Vec<OrderCandidate>,
}

impl SpectralConfig {
    /// Dimensions only, no eigenvalue targets.
    pub fn manual(order_r: usize, m_r: usize, m_c: usize, state_dim: usize, dt: f64) -> Result<Self> {
        let cfg = SpectralConfig {
            order_r,
            m_r,
            m_c,
            latent_dim: m_r + m_c,
            state_dim,
            dt,
            target_eigs: vec![],
            koopman_init: Matrix::identity(m_r + m_c),
            singular_values: vec![],
            tol_imag: default_tol_imag(),
            candidates: vec![],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn has_targets(&self) -> bool {
        !self.target_eigs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.order_r == 0 {
            return Err(Error::Config("order must be at least 1".into()));
        }
        if self.m_c % 2 != 0 {
            return Err(Error::Config(format!("m_c must be even, got {}", self.m_c)));
        }
        if self.latent_dim != self.m_r + self.m_c || self.latent_dim == 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must equal m_r + m_c = {} and be positive",
                self.latent_dim,
                self.m_r + self.m_c
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.koopman_init.shape() != (self.latent_dim, self.latent_dim) {
            return Err(Error::Config("koopman_init must be latent_dim x latent_dim".into()));
        }
        if self.has_targets() {
            if self.target_eigs.len() != self.latent_dim {
                return Err(Error::Config("target_eigs length must equal latent_dim".into()));
            }
            let (pairs, reals) = self.continuous_targets();
            if pairs.len() * 2 != self.m_c || reals.len() != self.m_r {
                return Err(Error::Config("target_eigs disagree with m_c".into()));
            }
        }
        Ok(())
    }

    /// Targets in continuous time: `(μ, ω)` per complex pair and `μ` per real
    /// eigenvalue, with `λ = exp((μ ± iω)·dt)`.
    pub fn continuous_targets(&self) -> (Vec<(f64, f64)>, Vec<f64>) {
        let log_mod = |z: Complex64| z.norm().max(1e-300).ln() / self.dt;
        let mut pairs = Vec::new();
        let mut reals = Vec::new();
        let mut i = 0;
        let t = &self.target_eigs;
        while i < t.len() {
            let z = t[i];
            let paired = !is_real(z, self.tol_imag) && i + 1 < t.len() && t[i + 1] == z.conj();
            if paired {
                pairs.push((log_mod(z), z.arg().abs() / self.dt));
                i += 2;
            } else {
                // a negative real eigenvalue keeps only its modulus
                reals.push(log_mod(z));
                i += 1;
            }
        }
        (pairs, reals)
    }
}

/// Full extraction output. `observables` is the denoised Hankel surrogate at
/// the chosen order, kept for inspection.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub config: SpectralConfig,
    pub observables: HankelMatrix,
}

struct Candidate {
    summary: OrderCandidate,
    /// Mean squared norm of the held-out targets, for scale.
    energy: f64,
    havok: Havok,
    class: SpectrumClass,
    denoised: HankelMatrix,
    singular_values: Vec<f64>,
}

fn fit_order(
    subset: &[Trajectory],
    r: usize,
    opts: &SpectralOptions,
) -> Result<Candidate> {
    let h = build_hankel_multi(subset, r, opts.windows)?;
    let s0 = singular_values(&h.mat)?;
    // longer windows accumulate more noise energy, so the threshold scales with span
    let lam = opts.lam_rel * s0[0] * (r.saturating_sub(1)).max(1) as f64;
    let denoised = denoise_lowrank(&h, lam, opts.denoise_iters)?;
    let s_den = singular_values(&denoised.mat)?;
    let (m, n) = denoised.mat.shape();
    let sigma = lam / ((m as f64).sqrt() + (n as f64).sqrt());
    let noise = if sigma > 0.0 {
        NoiseEstimate::Known(sigma)
    } else {
        NoiseEstimate::Median
    };
    let rank = estimate_rank(&s_den, (m, n), noise);
    // regress on the raw matrix: the shrunk surrogate biases the operator toward 0
    let havok = havok_koopman(&h, rank)?;
    let class = classify_spectrum(&havok.eigs, opts.tol_imag)?;

    // held-out residual on the windows after the fitting block
    let sd = h.state_dim;
    let mut err = 0.0;
    let mut energy = 0.0;
    let mut count = 0usize;
    for t in subset {
        let rest = Trajectory {
            states: t.states[opts.windows..].to_vec(),
            dt: t.dt,
            system: t.system,
        };
        let q = rest.len() + 1 - r;
        let hh = build_hankel(&rest, r, q)?;
        let pred = havok.predict(&hh.mat.columns(0, q - 1));
        for j in 0..q - 1 {
            for d in 0..sd {
                let row = (r - 1) * sd + d;
                let target = hh.mat[(row, j + 1)];
                let e = pred[(row, j)] - target;
                err += e * e;
                energy += target * target;
            }
            count += 1;
        }
    }
    let residual = err / count as f64;
    Ok(Candidate {
        summary: OrderCandidate {
            order: r,
            rank,
            lam,
            residual,
            m_r: class.m_r,
            m_c: class.m_c,
            warning: havok.warning.clone(),
        },
        energy: energy / count as f64,
        havok,
        class,
        denoised,
        singular_values: s0,
    })
}

/// Last order whose relative residual drop over the previous order reaches
/// `tol_improve`; every later order improves by less. Residuals at or below
/// `floor` are already exact and cannot improve.
pub fn select_order(residuals: &[f64], tol_improve: f64, floor: f64) -> usize {
    let mut order = 1;
    for r in 1..residuals.len() {
        let prev = residuals[r - 1];
        let gain = if prev > floor.max(0.0) { (prev - residuals[r]) / prev } else { 0.0 };
        if gain >= tol_improve {
            order = r + 1;
        }
    }
    order
}

/// Relative residual below which a fit is exact up to rounding.
const RESIDUAL_FLOOR: f64 = 1e-20;

/// Runs the stage on normalized training trajectories.
pub fn extract(train: &[Trajectory], opts: &SpectralOptions) -> Result<Extraction> {
    if opts.r_max == 0 {
        return Err(Error::Config("r_max must be at least 1".into()));
    }
    if opts.windows < 2 || opts.subset == 0 {
        return Err(Error::Config("windows must be >= 2 and subset >= 1".into()));
    }
    let subset = &train[..opts.subset.min(train.len())];
    if subset.is_empty() {
        return Err(Error::Config("no training trajectories".into()));
    }
    let orders: Vec<usize> = match opts.forced_order {
        Some(0) => return Err(Error::Config("forced order must be at least 1".into())),
        Some(r) => vec![r],
        None => (1..=opts.r_max).collect(),
    };
    let r_top = *orders.last().unwrap();
    let shortest = subset.iter().map(|t| t.len()).min().unwrap();
    // fitting windows plus at least two held-out delay vectors
    let need = opts.windows + r_top + 1;
    if shortest < need {
        return Err(Error::Config(format!(
            "order {r_top} with {} windows needs trajectories of length >= {need}, shortest is {shortest}",
            opts.windows
        )));
    }

    let mut candidates = Vec::with_capacity(orders.len());
    for &r in &orders {
        candidates.push(fit_order(subset, r, opts)?);
    }
    let chosen = match opts.forced_order {
        Some(_) => 0,
        None => {
            let residuals: Vec<f64> = candidates.iter().map(|c| c.summary.residual).collect();
            let floor = RESIDUAL_FLOOR * candidates[0].energy;
            select_order(&residuals, opts.tol_improve, floor) - 1
        }
    };
    let summaries = candidates.iter().map(|c| c.summary.clone()).collect();
    let c = candidates.swap_remove(chosen);
    let config = SpectralConfig {
        order_r: c.summary.order,
        m_r: c.class.m_r,
        m_c: c.class.m_c,
        latent_dim: c.class.m_r + c.class.m_c,
        state_dim: subset[0].state_dim(),
        dt: subset[0].dt,
        target_eigs: c.class.target_eigs,
        koopman_init: c.havok.koopman,
        singular_values: c.singular_values,
        tol_imag: opts.tol_imag,
        candidates: summaries,
    };
    config.validate()?;
    Ok(Extraction {
        config,
        observables: c.denoised,
    })
}

/// Runs [`extract`] on a dataset's normalized training split.
pub fn extract_dataset(data: &Dataset, opts: &SpectralOptions) -> Result<Extraction> {
    extract(&data.train_normalized(), opts)
}

pub fn estimate_order(data: &Dataset, r_max: usize, tol_improve: f64) -> Result<usize> {
    let opts = SpectralOptions {
        r_max,
        tol_improve,
        ..SpectralOptions::default()
    };
    Ok(extract_dataset(data, &opts)?.config.order_r)
}

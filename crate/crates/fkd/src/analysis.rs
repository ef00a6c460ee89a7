//! Dirichlet energy, its per-band decomposition under the framelet
//! transform, the ε-perturbed and simplified-propagation energies, and
//! node-pair sensitivity (empirical Jacobians against their closed-form
//! bounds).

use crate::error::{FkdError, Result};
use crate::framelet::{BandAdjacencies, FrameletSystem};
use crate::graph::Operators;
use crate::mat::Mat;

/// ½ tr(Hᵀ L̂ H). Non-negative up to roundoff since L̂ ⪰ 0.
pub fn dirichlet_energy(h: &Mat, ops: &Operators) -> Result<f64> {
    if h.rows() != ops.l_hat.rows() {
        return Err(FkdError::ShapeMismatch {
            expected: format!("{} x d", ops.l_hat.rows()),
            got: format!("{} x {}", h.rows(), h.cols()),
        });
    }
    Ok(0.5 * h.dot(&ops.l_hat.matmul(h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMode {
    Framelet,
    Simplified(usize),
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub total: f64,
    pub per_band: Vec<((usize, usize), f64)>,
    pub mode: EnergyMode,
}

impl EnergyReport {
    pub fn band_sum(&self) -> f64 {
        self.per_band.iter().map(|(_, e)| e).sum()
    }
}

/// Per-band energies E_{r,j} = ½ tr((W H)ᵀ L̂ (W H)); their sum conserves the
/// total energy in exact mode.
pub fn band_energies(fs: &FrameletSystem, h: &Mat, ops: &Operators) -> Result<EnergyReport> {
    let total = dirichlet_energy(h, ops)?;
    let mut per_band = Vec::with_capacity(fs.num_bands());
    for (&band, w) in fs.index_set.iter().zip(&fs.w) {
        let wh = w.matmul(h);
        per_band.push((band, dirichlet_energy(&wh, ops)?));
    }
    Ok(EnergyReport {
        total,
        per_band,
        mode: EnergyMode::Framelet,
    })
}

/// The ε-perturbed energy: the low-pass band is measured against L̂ + εI and
/// every high-pass band against L̂ − εI.
pub fn perturbed_energy(fs: &FrameletSystem, h: &Mat, ops: &Operators, eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for (b, w) in fs.w.iter().enumerate() {
        let wh = w.matmul(h);
        let base = dirichlet_energy(&wh, ops)?;
        let sign = if b == fs.lowpass_index() { 1.0 } else { -1.0 };
        total += base + 0.5 * sign * eps * wh.frobenius_sq();
    }
    Ok(total)
}

/// Total energy under simplified-framelet propagation at power `l`,
/// evaluated spectrally: ½ Σ_c Σ_i λ_i ĥ_c(i)² Σ_b g_b(λ_i)^{2l}.
///
/// Requires an exact-mode system (the derivation needs the multipliers).
pub fn simplified_energy(fs: &FrameletSystem, h: &Mat, ops: &Operators, l: usize) -> Result<f64> {
    let (Some(dec), Some(mults)) = (&fs.spectral, &fs.multipliers) else {
        return Err(FkdError::ExactModeRequired);
    };
    if h.rows() != ops.l_hat.rows() {
        return Err(FkdError::ShapeMismatch {
            expected: format!("{} x d", ops.l_hat.rows()),
            got: format!("{} x {}", h.rows(), h.cols()),
        });
    }
    let h_hat = dec.u.matmul(h);
    let mut total = 0.0;
    for i in 0..dec.n() {
        let row_sq: f64 = h_hat.row(i).iter().map(|v| v * v).sum();
        let mult_sum: f64 = mults.iter().map(|m| m[i].powi(2 * l as i32)).sum();
        total += dec.lambda[i] * row_sq * mult_sum;
    }
    Ok(0.5 * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMode {
    Spatial,
    Simplified,
}

/// Closed-form sensitivity bound matrix.
///
/// Spatial, `layers` propagation steps: (d·β)^layers · (Σ_b |A_b|)^layers.
/// Simplified, band power `layers`: d·β · Σ_b |A_b|^layers.
/// Absolute values are entrywise, taken before any powering.
pub fn sensitivity_bound(
    ba: &BandAdjacencies,
    beta: f64,
    d: usize,
    layers: usize,
    mode: SensitivityMode,
) -> Mat {
    assert!(layers >= 1);
    let n = ba.a_band[0].rows();
    match mode {
        SensitivityMode::Spatial => {
            let mut sum_abs = Mat::zeros(n, n);
            for a in &ba.a_band {
                sum_abs.add_assign(&a.map(f64::abs));
            }
            let mut power = sum_abs.clone();
            for _ in 1..layers {
                power = power.matmul(&sum_abs);
            }
            power.scale((d as f64 * beta).powi(layers as i32))
        }
        SensitivityMode::Simplified => {
            let mut total = Mat::zeros(n, n);
            for a in &ba.a_band {
                let abs = a.map(f64::abs);
                let mut power = abs.clone();
                for _ in 1..layers {
                    power = power.matmul(&abs);
                }
                total.add_assign(&power);
            }
            total.scale(d as f64 * beta)
        }
    }
}

/// An activation-free teacher whose Jacobian is exact.
pub enum LinearModel<'a> {
    /// Per-layer per-band weights, propagated as Σ_b A_b · H · W_b per layer.
    Spatial {
        ba: &'a BandAdjacencies,
        weights: &'a [Vec<Mat>],
    },
    /// Σ_b A_b^power · X · W_b.
    Simplified {
        ba: &'a BandAdjacencies,
        weights: &'a [Mat],
        power: usize,
    },
}

impl LinearModel<'_> {
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        match self {
            LinearModel::Spatial { ba, weights } => {
                let mut h = x.clone();
                for layer in weights.iter() {
                    let mut next: Option<Mat> = None;
                    for (a, w) in ba.a_band.iter().zip(layer) {
                        let term = a.matmul(&h.matmul(w));
                        match &mut next {
                            Some(acc) => acc.add_assign(&term),
                            slot => *slot = Some(term),
                        }
                    }
                    h = next.expect("at least one band");
                }
                Ok(h)
            }
            LinearModel::Simplified {
                ba,
                weights,
                power,
            } => {
                let mut out: Option<Mat> = None;
                for (b, w) in weights.iter().enumerate() {
                    let a_pow = ba.power(b, *power)?;
                    let term = a_pow.matmul(&x.matmul(w));
                    match &mut out {
                        Some(acc) => acc.add_assign(&term),
                        slot => *slot = Some(term),
                    }
                }
                Ok(out.expect("at least one band"))
            }
        }
    }

    /// Number of propagation steps (the exponent the bounds use).
    pub fn layers(&self) -> usize {
        match self {
            LinearModel::Spatial { weights, .. } => weights.len(),
            LinearModel::Simplified { power, .. } => *power,
        }
    }

    /// Max layer width d for the spatial bound; d0 for the simplified one.
    pub fn width_bound(&self, d0: usize) -> usize {
        match self {
            LinearModel::Spatial { weights, .. } => {
                let mut d = d0;
                for layer in weights.iter() {
                    d = d.max(layer[0].rows()).max(layer[0].cols());
                }
                d
            }
            LinearModel::Simplified { .. } => d0,
        }
    }

    /// Max |entry| over every weight matrix.
    pub fn beta(&self) -> f64 {
        match self {
            LinearModel::Spatial { weights, .. } => weights
                .iter()
                .flatten()
                .fold(0.0_f64, |m, w| m.max(w.max_abs())),
            LinearModel::Simplified { weights, .. } => {
                weights.iter().fold(0.0_f64, |m, w| m.max(w.max_abs()))
            }
        }
    }
}

/// |∂ h_{v,q} / ∂ x_{u,p}| of the linear model's output by central finite
/// differences (step 1e-5) around the zero input.
pub fn sensitivity_empirical(
    model: &LinearModel,
    in_dim: usize,
    n: usize,
    u: usize,
    v: usize,
    p: usize,
    q: usize,
) -> Result<f64> {
    let step = 1e-5;
    let mut x = Mat::zeros(n, in_dim);
    x.set(u, p, step);
    let up = model.forward(&x)?;
    x.set(u, p, -step);
    let down = model.forward(&x)?;
    Ok(((up.get(v, q) - down.get(v, q)) / (2.0 * step)).abs())
}

/// The same Jacobian entry from one exact linear-map evaluation (the model is
/// linear, so pushing an indicator through it reads the entry directly).
pub fn sensitivity_exact(
    model: &LinearModel,
    in_dim: usize,
    n: usize,
    u: usize,
    v: usize,
    p: usize,
    q: usize,
) -> Result<f64> {
    let mut e = Mat::zeros(n, in_dim);
    e.set(u, p, 1.0);
    Ok(model.forward(&e)?.get(v, q).abs())
}

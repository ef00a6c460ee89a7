//! Multi-scale framelet decomposition matrices, their Chebyshev
//! approximation, band adjacencies with powers, and tightness checks.
//!
//! The transform splits a graph signal into one low-pass band `(0, J)` and
//! high-pass bands `(r, j)` for `r = 1..L`, `j = 0..J`. The low-pass matrix
//! composes the scaling filter across scales `m..m+J`; a high-pass matrix at
//! scale `j` applies the band filter at scale `m+j` on top of the scaling
//! filters below it. Tightness — the band matrices' Gram sum being the
//! identity — is what every consumer of the decomposition leans on.

use std::path::Path;
use std::sync::Arc;

use crate::eig::{symmetric_eig, SpectralDecomposition};
use crate::error::{FkdError, Result};
use crate::graph::Operators;
use crate::mat::Mat;

type Filter = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Filter bank: one scaling filter and `L` band filters on [0, π], plus the
/// scale bookkeeping (top level `J`, coarsest level `m`).
#[derive(Clone)]
pub struct FilterBank {
    pub num_highpass: usize,
    pub top_scale: usize,
    pub coarsest: u32,
    a_hat: Filter,
    b_hat: Vec<Filter>,
}

impl std::fmt::Debug for FilterBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterBank")
            .field("num_highpass", &self.num_highpass)
            .field("top_scale", &self.top_scale)
            .field("coarsest", &self.coarsest)
            .finish()
    }
}

/// Haar-type bank: a(ξ) = cos(ξ/2), b(ξ) = sin(ξ/2). The coarsest scale `m`
/// is the smallest non-negative integer with 2^{-m}·lambda_max ≤ π.
pub fn haar_filter_bank(num_highpass: usize, top_scale: usize, lambda_max: f64) -> FilterBank {
    assert_eq!(num_highpass, 1, "the Haar bank has a single band filter");
    assert!(top_scale >= 1, "need at least one scale level");
    let mut m = 0u32;
    while lambda_max / f64::powi(2.0, m as i32) > std::f64::consts::PI {
        m += 1;
    }
    FilterBank {
        num_highpass,
        top_scale,
        coarsest: m,
        a_hat: Arc::new(|xi: f64| (xi / 2.0).cos()),
        b_hat: vec![Arc::new(|xi: f64| (xi / 2.0).sin())],
    }
}

impl FilterBank {
    pub fn a(&self, xi: f64) -> f64 {
        (self.a_hat)(xi)
    }

    pub fn b(&self, r: usize, xi: f64) -> f64 {
        assert!((1..=self.num_highpass).contains(&r));
        (self.b_hat[r - 1])(xi)
    }

    /// Band index set: the low pass `(0, J)` first, then `(r, j)` for
    /// `r = 1..L`, `j = 0..J`.
    pub fn index_set(&self) -> Vec<(usize, usize)> {
        let mut set = vec![(0, self.top_scale)];
        for r in 1..=self.num_highpass {
            for j in 0..=self.top_scale {
                set.push((r, j));
            }
        }
        set
    }

    /// Spectral multiplier of band `(r, j)` at eigenvalue `lambda`.
    pub fn multiplier(&self, r: usize, j: usize, lambda: f64) -> f64 {
        let scale = |t: usize| lambda / f64::powi(2.0, self.coarsest as i32 + t as i32);
        if r == 0 {
            (0..=self.top_scale).map(|t| self.a(scale(t))).product()
        } else if j == 0 {
            self.b(r, scale(0))
        } else {
            let low: f64 = (0..j).map(|t| self.a(scale(t))).product();
            self.b(r, scale(j)) * low
        }
    }

    /// Max over a 1001-point grid on [0, π] of |Σ_r b_r(ξ)² + a(ξ)² − 1|.
    pub fn identity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..=1000 {
            let xi = std::f64::consts::PI * k as f64 / 1000.0;
            let mut s = self.a(xi).powi(2);
            for r in 1..=self.num_highpass {
                s += self.b(r, xi).powi(2);
            }
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

/// How the band matrices were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FrameletMode {
    Exact,
    Chebyshev(usize),
}

/// The transform matrices, one per band, plus (in exact mode) the spectral
/// data they were assembled from.
#[derive(Debug, Clone)]
pub struct FrameletSystem {
    pub index_set: Vec<(usize, usize)>,
    pub w: Vec<Mat>,
    pub mode: FrameletMode,
    /// Present in exact mode; consumed by the spectral energy analysis.
    pub spectral: Option<SpectralDecomposition>,
    /// Per-band multiplier vectors aligned with `spectral.lambda`.
    pub multipliers: Option<Vec<Vec<f64>>>,
}

impl FrameletSystem {
    pub fn n(&self) -> usize {
        self.w[0].rows()
    }

    pub fn num_bands(&self) -> usize {
        self.index_set.len()
    }

    pub fn band(&self, r: usize, j: usize) -> Option<&Mat> {
        self.index_set
            .iter()
            .position(|&b| b == (r, j))
            .map(|i| &self.w[i])
    }

    /// Position of the low-pass band in `index_set` (always 0 by
    /// construction, kept explicit for readers).
    pub fn lowpass_index(&self) -> usize {
        0
    }
}

/// Exact band matrices via eigendecomposition of L̂ (Gram sum residual
/// ≤ 1e-8).
pub fn exact_framelet_matrices(ops: &Operators, fb: &FilterBank) -> Result<FrameletSystem> {
    let dec = symmetric_eig(&ops.l_hat)?;
    let index_set = fb.index_set();
    let mut w = Vec::with_capacity(index_set.len());
    let mut multipliers = Vec::with_capacity(index_set.len());
    for &(r, j) in &index_set {
        let mult: Vec<f64> = dec
            .lambda
            .iter()
            .map(|&l| fb.multiplier(r, j, l))
            .collect();
        w.push(dec.spectral_matrix(&mult));
        multipliers.push(mult);
    }
    Ok(FrameletSystem {
        index_set,
        w,
        mode: FrameletMode::Exact,
        spectral: Some(dec),
        multipliers: Some(multipliers),
    })
}

/// Coefficients of the degree-`degree` Chebyshev interpolant of `f` on
/// [0, π]. The interpolant is `p(x) = coef[0] + Σ_{k≥1} coef[k]·T_k(x)` with
/// `x = 2ξ/π − 1`.
pub fn chebyshev_coefficients(f: impl Fn(f64) -> f64, degree: usize) -> Vec<f64> {
    assert!(degree >= 1);
    let n = degree + 1;
    let samples: Vec<f64> = (0..n)
        .map(|k| {
            let theta = std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            let x = theta.cos();
            let xi = std::f64::consts::PI * (x + 1.0) / 2.0;
            f(xi)
        })
        .collect();
    let mut coef = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = 0.0;
        for (i, &fi) in samples.iter().enumerate() {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            s += fi * (k as f64 * theta).cos();
        }
        let ck = 2.0 * s / n as f64;
        coef.push(if k == 0 { ck / 2.0 } else { ck });
    }
    coef
}

/// Evaluate a Chebyshev interpolant at a scalar ξ ∈ [0, π] (Clenshaw).
pub fn chebyshev_eval(coef: &[f64], xi: f64) -> f64 {
    let x = 2.0 * xi / std::f64::consts::PI - 1.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coef.iter().skip(1).rev() {
        let b = 2.0 * x * b1 - b2 + c;
        b2 = b1;
        b1 = b;
    }
    coef[0] + x * b1 - b2
}

/// Clenshaw on a matrix argument: the interpolant applied to `m` whose
/// spectrum lies in [0, π].
fn chebyshev_eval_matrix(coef: &[f64], m: &Mat) -> Mat {
    let n = m.rows();
    // x = (2/π) m − I
    let mut x = m.scale(2.0 / std::f64::consts::PI);
    for i in 0..n {
        x.set(i, i, x.get(i, i) - 1.0);
    }
    let mut b1 = Mat::zeros(n, n);
    let mut b2 = Mat::zeros(n, n);
    for &c in coef.iter().skip(1).rev() {
        let mut b = x.matmul(&b1).scale(2.0);
        b.add_assign(&b2.scale(-1.0));
        for i in 0..n {
            b.set(i, i, b.get(i, i) + c);
        }
        b2 = b1;
        b1 = b;
    }
    let mut out = x.matmul(&b1);
    out.add_assign(&b2.scale(-1.0));
    for i in 0..n {
        out.set(i, i, out.get(i, i) + coef[0]);
    }
    out
}

/// Band matrices via Chebyshev interpolants evaluated on L̂ directly — no
/// eigendecomposition. The per-band compositions mirror the exact
/// construction, with each filter replaced by its interpolant at the scaled
/// Laplacian.
pub fn quasi_framelet_matrices(
    ops: &Operators,
    fb: &FilterBank,
    degree: usize,
) -> Result<FrameletSystem> {
    if degree < 4 {
        return Err(FkdError::DegreeTooLow(degree));
    }
    let coef_a = chebyshev_coefficients(|xi| fb.a(xi), degree);
    let coef_b: Vec<Vec<f64>> = (1..=fb.num_highpass)
        .map(|r| chebyshev_coefficients(|xi| fb.b(r, xi), degree))
        .collect();

    // Filter evaluations at each dilation of L̂, computed once and reused.
    let scaled = |t: usize| {
        ops.l_hat
            .scale(1.0 / f64::powi(2.0, fb.coarsest as i32 + t as i32))
    };
    let a_at: Vec<Mat> = (0..=fb.top_scale)
        .map(|t| chebyshev_eval_matrix(&coef_a, &scaled(t)))
        .collect();
    let b_at: Vec<Vec<Mat>> = coef_b
        .iter()
        .map(|coef| {
            (0..=fb.top_scale)
                .map(|t| chebyshev_eval_matrix(coef, &scaled(t)))
                .collect()
        })
        .collect();

    let index_set = fb.index_set();
    let mut w = Vec::with_capacity(index_set.len());
    for &(r, j) in &index_set {
        let mat = if r == 0 {
            // a(Λ/2^{m+J}) ... a(Λ/2^m), composed top scale down.
            let mut acc = a_at[fb.top_scale].clone();
            for t in (0..fb.top_scale).rev() {
                acc = acc.matmul(&a_at[t]);
            }
            acc
        } else if j == 0 {
            b_at[r - 1][0].clone()
        } else {
            let mut acc = b_at[r - 1][j].clone();
            for t in (0..j).rev() {
                acc = acc.matmul(&a_at[t]);
            }
            acc
        };
        w.push(mat);
    }
    Ok(FrameletSystem {
        index_set,
        w,
        mode: FrameletMode::Chebyshev(degree),
        spectral: None,
        multipliers: None,
    })
}

/// ‖Σ W_{r,j}^T W_{r,j} − I‖_max.
pub fn tightness_residual(fs: &FrameletSystem) -> f64 {
    let n = fs.n();
    let mut gram = Mat::zeros(n, n);
    for w in &fs.w {
        gram.add_assign(&w.t_matmul(w));
    }
    gram.sub(&Mat::identity(n)).max_abs()
}

/// Default residual tolerance for a mode (exact: 1e-8; Chebyshev with
/// degree ≥ 10: 1e-3).
pub fn mode_tolerance(mode: FrameletMode) -> f64 {
    match mode {
        FrameletMode::Exact => 1e-8,
        FrameletMode::Chebyshev(_) => 1e-3,
    }
}

/// Per-band sandwiched adjacency `W^T Â W` and its matrix powers 1..l_max.
#[derive(Debug, Clone)]
pub struct BandAdjacencies {
    pub index_set: Vec<(usize, usize)>,
    pub a_band: Vec<Mat>,
    /// `powers[b][l-1]` is the l-th power of `a_band[b]`.
    pub powers: Vec<Vec<Mat>>,
}

impl BandAdjacencies {
    pub fn num_bands(&self) -> usize {
        self.index_set.len()
    }

    pub fn power(&self, band: usize, l: usize) -> Result<&Mat> {
        if l == 0 || l > self.powers[band].len() {
            return Err(FkdError::MissingPower {
                power: l,
                max: self.powers[band].len(),
            });
        }
        Ok(&self.powers[band][l - 1])
    }

    pub fn l_max(&self) -> usize {
        self.powers.first().map_or(0, |p| p.len())
    }
}

/// Build band adjacencies from a framelet system, with powers up to `l_max`
/// by repeated multiplication.
pub fn band_adjacencies(fs: &FrameletSystem, ops: &Operators, l_max: usize) -> BandAdjacencies {
    assert!(l_max >= 1);
    build_band_adjacencies(fs, &ops.a_hat, l_max)
}

/// Same construction around an arbitrary center matrix; the energy
/// perturbation swaps in Â ∓ εI here.
pub fn build_band_adjacencies(fs: &FrameletSystem, center_low: &Mat, l_max: usize) -> BandAdjacencies {
    build_band_adjacencies_split(fs, center_low, center_low, l_max)
}

pub fn build_band_adjacencies_split(
    fs: &FrameletSystem,
    center_low: &Mat,
    center_high: &Mat,
    l_max: usize,
) -> BandAdjacencies {
    let mut a_band = Vec::with_capacity(fs.num_bands());
    for (b, w) in fs.w.iter().enumerate() {
        let center = if b == fs.lowpass_index() {
            center_low
        } else {
            center_high
        };
        a_band.push(w.t_matmul(&center.matmul(w)));
    }
    let powers = a_band
        .iter()
        .map(|a| {
            let mut ps = vec![a.clone()];
            for _ in 1..l_max {
                let next = ps.last().unwrap().matmul(a);
                ps.push(next);
            }
            ps
        })
        .collect();
    BandAdjacencies {
        index_set: fs.index_set.clone(),
        a_band,
        powers,
    }
}

const CACHE_MAGIC: &[u8; 5] = b"FRMW1";

/// Write the band matrices to a binary cache. Header: magic, n, band count,
/// mode byte, degree, topology hash; then per band (r, j, row-major f64 LE).
pub fn save_framelet_cache(
    fs: &FrameletSystem,
    graph_hash: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let n = fs.n();
    let (mode_byte, degree) = match fs.mode {
        FrameletMode::Exact => (0u8, 0u32),
        FrameletMode::Chebyshev(d) => (1u8, d as u32),
    };
    let mut buf = Vec::with_capacity(32 + fs.num_bands() * (8 + n * n * 8));
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(fs.num_bands() as u32).to_le_bytes());
    buf.push(mode_byte);
    buf.extend_from_slice(&degree.to_le_bytes());
    buf.extend_from_slice(&graph_hash.to_le_bytes());
    for (&(r, j), w) in fs.index_set.iter().zip(&fs.w) {
        buf.extend_from_slice(&(r as u32).to_le_bytes());
        buf.extend_from_slice(&(j as u32).to_le_bytes());
        for v in w.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| FkdError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load a cached system, validating the header against the current graph
/// hash. Exact-mode extras (spectral data) are not cached, so a loaded
/// exact-mode system cannot serve the spectral energy analysis.
pub fn load_framelet_cache(path: impl AsRef<Path>, graph_hash: u64) -> Result<FrameletSystem> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| FkdError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let fail = |msg: &str| FkdError::CacheInvalid(format!("{}: {msg}", path.display()));
    if buf.len() < 26 || &buf[..5] != CACHE_MAGIC {
        return Err(fail("bad magic"));
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let n = rd_u32(5) as usize;
    let bands = rd_u32(9) as usize;
    let mode_byte = buf[13];
    let degree = rd_u32(14) as usize;
    let stored_hash = u64::from_le_bytes(buf[18..26].try_into().unwrap());
    if stored_hash != graph_hash {
        return Err(fail("graph hash mismatch"));
    }
    let mode = match mode_byte {
        0 => FrameletMode::Exact,
        1 => FrameletMode::Chebyshev(degree),
        _ => return Err(fail("bad mode byte")),
    };
    let per_band = 8 + n * n * 8;
    if buf.len() != 26 + bands * per_band {
        return Err(fail("truncated payload"));
    }
    let mut index_set = Vec::with_capacity(bands);
    let mut w = Vec::with_capacity(bands);
    for b in 0..bands {
        let off = 26 + b * per_band;
        let r = rd_u32(off) as usize;
        let j = rd_u32(off + 4) as usize;
        index_set.push((r, j));
        let mut data = Vec::with_capacity(n * n);
        for k in 0..n * n {
            let o = off + 8 + k * 8;
            data.push(f64::from_le_bytes(buf[o..o + 8].try_into().unwrap()));
        }
        w.push(Mat::from_vec(n, n, data));
    }
    Ok(FrameletSystem {
        index_set,
        w,
        mode,
        spectral: None,
        multipliers: None,
    })
}

//! Real spherical and head harmonic bases sampled at the electrodes, and the
//! projection `Bᵀ Γ V` that turns an I x T potential matrix into
//! (N+1)² x T harmonic coefficients.
//!
//! Associated Legendre values carry no Condon-Shortley phase; the `(-1)^m`
//! factor of the real harmonic is applied by the harmonic itself. Head
//! harmonics evaluate the Legendre functions at `a cosθ - b`, which maps the
//! cap θ <= 2π/3 onto [-1, 1] when `a = 4/3, b = 1/3`.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{abstract_montage, EpochSet, Montage, Recording};

/// `P_n^m(x)` for `0 <= m <= n`, `|x| <= 1`, without Condon-Shortley phase.
pub fn alp(n: usize, m: usize, x: f64) -> Result<f64> {
    if m > n {
        return Err(Error::invalid(format!("ALP order m={m} exceeds degree n={n}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("ALP argument {x} outside [-1, 1]")));
    }
    Ok(alp_unchecked(n, m, x))
}

fn alp_unchecked(n: usize, m: usize, x: f64) -> f64 {
    // diagonal ladder: P_m^m = (2m-1)!! (1-x^2)^(m/2)
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for i in 1..=m {
        pmm *= (2 * i - 1) as f64 * s;
    }
    if n == m {
        return pmm;
    }
    let mut prev = pmm;
    let mut cur = x * (2 * m + 1) as f64 * pmm;
    for l in (m + 2)..=n {
        let next = ((2 * l - 1) as f64 * x * cur - (l + m - 1) as f64 * prev) / (l - m) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

fn factorial_ratio(n: usize, m: usize) -> f64 {
    // (n-m)! / (n+m)!
    ((n - m + 1)..=(n + m)).fold(1.0, |acc, k| acc / k as f64)
}

fn check_degree(n: usize, m: i64) -> Result<usize> {
    let am = m.unsigned_abs() as usize;
    if am > n {
        return Err(Error::invalid(format!("|m|={am} exceeds n={n}")));
    }
    Ok(am)
}

/// Spherical normalization `sqrt((2n+1)(n-|m|)! / (4π (n+|m|)!))`.
pub fn k_norm(n: usize, m: i64) -> Result<f64> {
    let am = check_degree(n, m)?;
    Ok(((2 * n + 1) as f64 * factorial_ratio(n, am) / (4.0 * PI)).sqrt())
}

/// Head-harmonic normalization, `3π` in place of `4π`.
pub fn k_norm_head(n: usize, m: i64) -> Result<f64> {
    let am = check_degree(n, m)?;
    Ok(((2 * n + 1) as f64 * factorial_ratio(n, am) / (3.0 * PI)).sqrt())
}

fn real_harmonic(norm: f64, n: usize, m: i64, x: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    let p = alp_unchecked(n, am, x);
    if m == 0 {
        return norm * p;
    }
    let sign = if am % 2 == 0 { 1.0 } else { -1.0 };
    let trig = if m < 0 {
        (am as f64 * phi).sin()
    } else {
        (am as f64 * phi).cos()
    };
    sign * 2f64.sqrt() * norm * trig * p
}

pub fn spherical_harmonic(n: usize, m: i64, theta: f64, phi: f64) -> Result<f64> {
    let k = k_norm(n, m)?;
    Ok(real_harmonic(k, n, m, theta.cos(), phi))
}

/// Coefficients of the shifted Legendre argument `a cosθ - b`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftConstants {
    /// 1.33 and 0.33 as printed.
    #[default]
    Rounded,
    /// 4/3 and 1/3, which make the basis orthonormal on the θ <= 2π/3 cap.
    Exact,
}

impl ShiftConstants {
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            ShiftConstants::Rounded => (1.33, 0.33),
            ShiftConstants::Exact => (4.0 / 3.0, 1.0 / 3.0),
        }
    }

    pub fn argument(self, theta: f64) -> f64 {
        let (a, b) = self.coefficients();
        (a * theta.cos() - b).clamp(-1.0, 1.0)
    }
}

pub fn head_harmonic(n: usize, m: i64, theta: f64, phi: f64) -> Result<f64> {
    head_harmonic_with(n, m, theta, phi, ShiftConstants::Rounded)
}

pub fn head_harmonic_with(
    n: usize,
    m: i64,
    theta: f64,
    phi: f64,
    shift: ShiftConstants,
) -> Result<f64> {
    let k = k_norm_head(n, m)?;
    Ok(real_harmonic(k, n, m, shift.argument(theta), phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonicKind {
    Spherical,
    Head(ShiftConstants),
}

impl HarmonicKind {
    fn prefix(self) -> &'static str {
        match self {
            HarmonicKind::Spherical => "SH",
            HarmonicKind::Head(_) => "HH",
        }
    }
}

/// `(n, m)` pairs in column order: n ascending, m from -n to n.
pub fn degree_index(order: usize) -> Vec<(usize, i64)> {
    (0..=order)
        .flat_map(|n| (-(n as i64)..=n as i64).map(move |m| (n, m)))
        .collect()
}

pub fn max_order(channels: usize) -> usize {
    let mut n = 0;
    while (n + 2) * (n + 2) <= channels {
        n += 1;
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicBasis {
    pub kind: HarmonicKind,
    pub order: usize,
    /// Electrodes x (order+1)².
    pub matrix: Array2<f64>,
    pub montage: Montage,
}

impl HarmonicBasis {
    pub fn n_coefficients(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        degree_index(self.order)
            .into_iter()
            .map(|(n, m)| format!("{}({n},{m})", self.kind.prefix()))
            .collect()
    }
}

pub fn build_basis(kind: HarmonicKind, order: usize, montage: &Montage) -> Result<HarmonicBasis> {
    let channels = montage.len();
    if (order + 1) * (order + 1) > channels {
        return Err(Error::OrderTooLarge {
            order,
            channels,
            max_order: max_order(channels),
        });
    }
    let index = degree_index(order);
    let mut matrix = Array2::zeros((channels, index.len()));
    for (i, p) in montage.positions().iter().enumerate() {
        for (j, &(n, m)) in index.iter().enumerate() {
            matrix[[i, j]] = match kind {
                HarmonicKind::Spherical => spherical_harmonic(n, m, p.theta, p.phi)?,
                HarmonicKind::Head(shift) => head_harmonic_with(n, m, p.theta, p.phi, shift)?,
            };
        }
    }
    Ok(HarmonicBasis {
        kind,
        order,
        matrix,
        montage: montage.clone(),
    })
}

/// Diagonal sampling weights Γ.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights(Vec<f64>);

impl SamplingWeights {
    pub fn identity(channels: usize) -> Self {
        Self(vec![1.0; channels])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("sampling weights must be nonnegative"));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

fn projector(basis: &HarmonicBasis, gamma: &SamplingWeights, channels: usize) -> Result<Array2<f64>> {
    if channels != basis.matrix.nrows() {
        return Err(Error::Dimension {
            what: "channels vs harmonic basis rows",
            expected: basis.matrix.nrows(),
            actual: channels,
        });
    }
    if gamma.0.len() != channels {
        return Err(Error::Dimension {
            what: "sampling weights",
            expected: channels,
            actual: gamma.0.len(),
        });
    }
    let mut p = basis.matrix.t().to_owned();
    for (mut col, &g) in p.axis_iter_mut(Axis(1)).zip(&gamma.0) {
        col *= g;
    }
    Ok(p)
}

/// Per trial `Bᵀ Γ V`.
pub fn decompose(epochs: &EpochSet, basis: &HarmonicBasis, gamma: &SamplingWeights) -> Result<EpochSet> {
    let p = projector(basis, gamma, epochs.n_channels())?;
    let (trials, _, samples) = epochs.data().dim();
    let mut out = Array3::zeros((trials, p.nrows(), samples));
    for (mut dst, src) in out.outer_iter_mut().zip(epochs.data().outer_iter()) {
        dst.assign(&p.dot(&src));
    }
    epochs.map_channels(out, basis.coefficient_names())
}

/// `Bᵀ Γ V` on a continuous recording.
pub fn decompose_recording(
    rec: &Recording,
    basis: &HarmonicBasis,
    gamma: &SamplingWeights,
) -> Result<Recording> {
    let p = projector(basis, gamma, rec.n_channels())?;
    let names = basis.coefficient_names();
    let montage = Montage::new(names, abstract_montage("c", p.nrows()).positions().to_vec())?;
    rec.derived(p.dot(rec.data()), montage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alp_values() {
        for x in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(alp(0, 0, x).unwrap(), 1.0);
        }
        assert_abs_diff_eq!(alp(1, 0, 0.5).unwrap(), 0.5, epsilon = 1e-15);
        let x: f64 = 0.3;
        let closed = 3.0 * x * (1.0 - x * x).sqrt();
        assert_abs_diff_eq!(alp(2, 1, x).unwrap(), closed, epsilon = 1e-14);
        assert_abs_diff_eq!(alp(2, 1, 0.3).unwrap(), 0.858_545, epsilon = 1e-6);
        assert!(alp(1, 2, 0.0).is_err());
    }

    #[test]
    fn alp_matches_closed_forms_up_to_degree_three() {
        let closed = |n: usize, m: usize, x: f64| -> f64 {
            let s = (1.0 - x * x).sqrt();
            match (n, m) {
                (0, 0) => 1.0,
                (1, 0) => x,
                (1, 1) => s,
                (2, 0) => 0.5 * (3.0 * x * x - 1.0),
                (2, 1) => 3.0 * x * s,
                (2, 2) => 3.0 * (1.0 - x * x),
                (3, 0) => 0.5 * (5.0 * x.powi(3) - 3.0 * x),
                (3, 1) => 1.5 * (5.0 * x * x - 1.0) * s,
                (3, 2) => 15.0 * x * (1.0 - x * x),
                (3, 3) => 15.0 * s.powi(3),
                _ => unreachable!(),
            }
        };
        for i in 0..=40 {
            let x = -1.0 + i as f64 * 0.05;
            for n in 0..=3 {
                for m in 0..=n {
                    assert_abs_diff_eq!(alp(n, m, x).unwrap(), closed(n, m, x), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalization_constants() {
        assert_abs_diff_eq!(k_norm(0, 0).unwrap(), 0.282_094_8, epsilon = 1e-7);
        assert_abs_diff_eq!(k_norm_head(0, 0).unwrap(), 0.325_735_0, epsilon = 1e-7);
        let direct = (5.0 * 1.0 / (4.0 * PI * 6.0)).sqrt();
        assert_abs_diff_eq!(k_norm(2, 1).unwrap(), direct, epsilon = 1e-15);
        assert_abs_diff_eq!(k_norm(2, 1).unwrap(), 0.257_516, epsilon = 1e-6);
        assert_eq!(k_norm(2, -1).unwrap(), k_norm(2, 1).unwrap());
    }

    #[test]
    fn harmonic_point_values() {
        let c = (1.0 / (4.0 * PI)).sqrt();
        for (t, p) in [(0.1, 0.2), (1.0, 3.0), (2.5, 6.0)] {
            assert_abs_diff_eq!(spherical_harmonic(0, 0, t, p).unwrap(), c, epsilon = 1e-15);
            assert_abs_diff_eq!(
                head_harmonic(0, 0, t, p).unwrap(),
                (1.0 / (3.0 * PI)).sqrt(),
                epsilon = 1e-15
            );
        }
        assert_abs_diff_eq!(spherical_harmonic(1, 0, 0.0, 1.0).unwrap(), 0.488_603, epsilon = 1e-6);
        assert_abs_diff_eq!(head_harmonic(1, 0, 0.0, 0.0).unwrap(), 0.564_190, epsilon = 1e-6);
    }

    #[test]
    fn basis_dimensions() {
        let m = Montage::standard_31();
        assert_eq!(max_order(31), 4);
        for (n, cols) in [(4, 25), (3, 16), (2, 9)] {
            let b = build_basis(HarmonicKind::Spherical, n, &m).unwrap();
            assert_eq!(b.matrix.dim(), (31, cols));
        }
        assert!(matches!(
            build_basis(HarmonicKind::Spherical, 5, &m),
            Err(Error::OrderTooLarge { max_order: 4, .. })
        ));
        let sh = build_basis(HarmonicKind::Spherical, 2, &m).unwrap();
        let hh = build_basis(HarmonicKind::Head(ShiftConstants::Rounded), 2, &m).unwrap();
        for i in 0..31 {
            assert_abs_diff_eq!(sh.matrix[[i, 0]], k_norm(0, 0).unwrap(), epsilon = 1e-15);
            assert_abs_diff_eq!(hh.matrix[[i, 0]], k_norm_head(0, 0).unwrap(), epsilon = 1e-15);
        }
    }

    fn random_epochs(trials: usize, channels: usize, samples: usize, seed: u64) -> EpochSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((trials, channels, samples), |_| rng.gen_range(-1.0..1.0));
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        EpochSet::new(data, vec![0; trials], 500.0, (0.0, samples as f64 / 500.0), names).unwrap()
    }

    #[test]
    fn decompose_shape_zero_and_linearity() {
        let m = Montage::standard_31();
        let b = build_basis(HarmonicKind::Spherical, 4, &m).unwrap();
        let g = SamplingWeights::identity(31);
        let e = random_epochs(2, 31, 1500, 1);
        let out = decompose(&e, &b, &g).unwrap();
        assert_eq!(out.data().dim(), (2, 25, 1500));

        let zeros = e.map_channels(Array3::zeros(e.data().dim()), e.channel_names().to_vec()).unwrap();
        assert!(decompose(&zeros, &b, &g).unwrap().data().iter().all(|&v| v == 0.0));

        let f = random_epochs(2, 31, 1500, 2);
        let sum = e.map_channels(e.data() + f.data(), e.channel_names().to_vec()).unwrap();
        let lhs = decompose(&sum, &b, &g).unwrap();
        let rhs = out.data() + decompose(&f, &b, &g).unwrap().data();
        for (a, b) in lhs.data().iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_column_field_dominates_its_coefficient() {
        let m = Montage::standard_31();
        let b = build_basis(HarmonicKind::Spherical, 3, &m).unwrap();
        let g = SamplingWeights::identity(31);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..b.n_coefficients() {
            let course: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let data = Array3::from_shape_fn((1, 31, 200), |(_, c, t)| b.matrix[[c, j]] * course[t]);
            let names = (0..31).map(|c| format!("c{c}")).collect();
            let e = EpochSet::new(data, vec![0], 500.0, (0.0, 0.4), names).unwrap();
            let out = decompose(&e, &b, &g).unwrap();
            let energy: Vec<f64> = (0..b.n_coefficients())
                .map(|r| out.data().slice(ndarray::s![0, r, ..]).mapv(|v| v * v).sum())
                .collect();
            let best = energy.iter().cloned().fold(0.0, f64::max);
            assert_eq!(energy[j], best, "column {j}: {energy:?}");
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = build_basis(HarmonicKind::Spherical, 2, &Montage::standard_31()).unwrap();
        let e = random_epochs(1, 30, 10, 3);
        assert!(decompose(&e, &b, &SamplingWeights::identity(30)).is_err());
    }
}

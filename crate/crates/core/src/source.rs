//! sLORETA inverse solution for fixed-orientation dipoles and atlas scout
//! averaging.
//!
//! The lead field is average-referenced before inversion. Its rows then sum
//! to zero, so `L Lᵀ` always has the constant vector in its null space; the
//! inverse is taken on the complementary subspace, which coincides with
//! `Lᵀ (L Lᵀ + λI)⁻¹` whenever `λ > 0`.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_desc, to_na};
use crate::signal::{EpochSet, Montage, Recording};

#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    /// Channels x dipoles.
    matrix: Array2<f64>,
    positions: Option<Vec<[f64; 3]>>,
}

impl LeadField {
    pub fn new(matrix: Array2<f64>, positions: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("lead field has non-finite entries"));
        }
        if let Some(r) = matrix.rows().into_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid(format!("lead field row {r} is all zero")));
        }
        if let Some(p) = &positions {
            if p.len() != matrix.ncols() {
                return Err(Error::Dimension {
                    what: "dipole positions",
                    expected: matrix.ncols(),
                    actual: p.len(),
                });
            }
        }
        Ok(Self { matrix, positions })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn positions(&self) -> Option<&[[f64; 3]]> {
        self.positions.as_deref()
    }

    pub fn n_channels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_dipoles(&self) -> usize {
        self.matrix.ncols()
    }

    /// Each dipole's gain vector with its channel mean removed.
    pub fn average_referenced(&self) -> Array2<f64> {
        let mean = self.matrix.mean_axis(Axis(0)).expect("non-empty");
        let mut out = self.matrix.clone();
        for mut row in out.rows_mut() {
            row -= &mean;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    region_of: Vec<usize>,
    names: Vec<String>,
}

impl Atlas {
    pub fn new(region_of: Vec<usize>, names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("atlas needs at least one region"));
        }
        if let Some(&bad) = region_of.iter().find(|&&r| r >= names.len()) {
            return Err(Error::invalid(format!("region index {bad} >= {} regions", names.len())));
        }
        Ok(Self { region_of, names })
    }

    /// Partition dipoles into `regions` groups around farthest-point seeds.
    pub fn nearest_centers(positions: &[[f64; 3]], regions: usize) -> Result<Self> {
        if regions == 0 || regions > positions.len() {
            return Err(Error::invalid(format!(
                "cannot form {regions} regions from {} dipoles",
                positions.len()
            )));
        }
        let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
        let mut centers = vec![0usize];
        let mut nearest: Vec<f64> = positions.iter().map(|p| d2(p, &positions[0])).collect();
        while centers.len() < regions {
            let next = (0..positions.len())
                .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
                .expect("non-empty");
            centers.push(next);
            for (i, p) in positions.iter().enumerate() {
                nearest[i] = nearest[i].min(d2(p, &positions[next]));
            }
        }
        let region_of = positions
            .iter()
            .map(|p| {
                (0..regions)
                    .min_by(|&a, &b| {
                        d2(p, &positions[centers[a]]).total_cmp(&d2(p, &positions[centers[b]]))
                    })
                    .expect("non-empty")
            })
            .collect();
        let names = (0..regions).map(|r| format!("R{r}")).collect();
        Self::new(region_of, names)
    }

    pub fn region_of(&self) -> &[usize] {
        &self.region_of
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_regions(&self) -> usize {
        self.names.len()
    }

    pub fn n_dipoles(&self) -> usize {
        self.region_of.len()
    }

    /// Regions x dipoles averaging matrix.
    fn averaging_matrix(&self) -> Result<Array2<f64>> {
        let mut counts = vec![0usize; self.n_regions()];
        for &r in &self.region_of {
            counts[r] += 1;
        }
        let empty: Vec<String> = counts
            .iter()
            .zip(&self.names)
            .filter(|(c, _)| **c == 0)
            .map(|(_, n)| n.clone())
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyRegion(empty));
        }
        let mut m = Array2::zeros((self.n_regions(), self.n_dipoles()));
        for (d, &r) in self.region_of.iter().enumerate() {
            m[[r, d]] = 1.0 / counts[r] as f64;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SloretaKernel {
    /// Dipoles x channels minimum-norm operator.
    pub minimum_norm: Array2<f64>,
    /// Diagonal of the resolution matrix `K L`.
    pub resolution: Vec<f64>,
    /// Dipoles x channels standardized operator.
    pub standardized: Array2<f64>,
    pub lambda: f64,
}

impl SloretaKernel {
    pub fn n_channels(&self) -> usize {
        self.standardized.ncols()
    }

    pub fn n_dipoles(&self) -> usize {
        self.standardized.nrows()
    }
}

/// `trace(L Lᵀ) / (channels · snr²)` on the average-referenced lead field.
pub fn default_lambda(lf: &LeadField, snr: f64) -> f64 {
    let la = lf.average_referenced();
    la.iter().map(|v| v * v).sum::<f64>() / (lf.n_channels() as f64 * snr * snr)
}

pub fn sloreta_kernel(lf: &LeadField, lambda: f64) -> Result<SloretaKernel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("regularization must be finite and >= 0, got {lambda}")));
    }
    let channels = lf.n_channels();
    let la = lf.average_referenced();
    let la_na = to_na(&la);
    let gram = &la_na * la_na.transpose();
    let (values, vectors) = sym_eig_desc(&gram);
    let top = values[0] + lambda;
    if !(top > 0.0) {
        return Err(Error::Singular("lead field has no energy".into()));
    }
    let kept: Vec<usize> = (0..channels)
        .filter(|&i| values[i] + lambda > 1e-10 * top)
        .collect();
    if kept.len() + 1 < channels {
        return Err(Error::Singular(format!(
            "L Lᵀ + λI has rank {} on the {}-dimensional average-reference subspace",
            kept.len(),
            channels - 1
        )));
    }
    let mut inv = nalgebra::DMatrix::zeros(channels, channels);
    for &i in &kept {
        let e = vectors.column(i);
        inv += e * e.transpose() / (values[i] + lambda);
    }
    let k_na = la_na.transpose() * inv;
    let minimum_norm = Array2::from_shape_fn((k_na.nrows(), k_na.ncols()), |(i, j)| k_na[(i, j)]);
    let resolution: Vec<f64> = (0..lf.n_dipoles())
        .map(|v| minimum_norm.row(v).dot(&la.column(v)))
        .collect();
    if let Some((v, r)) = resolution.iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
        return Err(Error::Singular(format!(
            "non-positive resolution diagonal {r:.3e} at dipole {v}"
        )));
    }
    let mut standardized = minimum_norm.clone();
    for (mut row, r) in standardized.rows_mut().into_iter().zip(&resolution) {
        row /= r.sqrt();
    }
    Ok(SloretaKernel {
        minimum_norm,
        resolution,
        standardized,
        lambda,
    })
}

/// Standardized dipole series for every trial (channel axis becomes dipoles).
pub fn apply_inverse(kernel: &SloretaKernel, epochs: &EpochSet) -> Result<EpochSet> {
    if epochs.n_channels() != kernel.n_channels() {
        return Err(Error::Dimension {
            what: "epoch channels vs inverse kernel",
            expected: kernel.n_channels(),
            actual: epochs.n_channels(),
        });
    }
    let (trials, _, samples) = epochs.data().dim();
    let mut out = Array3::zeros((trials, kernel.n_dipoles(), samples));
    for (mut dst, src) in out.outer_iter_mut().zip(epochs.data().outer_iter()) {
        dst.assign(&kernel.standardized.dot(&src));
    }
    let names = (0..kernel.n_dipoles()).map(|d| format!("d{d}")).collect();
    epochs.map_channels(out, names)
}

/// Per region, the mean of its member dipole series.
pub fn scout_average(dipoles: &EpochSet, atlas: &Atlas) -> Result<EpochSet> {
    if atlas.n_dipoles() != dipoles.n_channels() {
        return Err(Error::Dimension {
            what: "atlas dipoles vs dipole series",
            expected: dipoles.n_channels(),
            actual: atlas.n_dipoles(),
        });
    }
    let avg = atlas.averaging_matrix()?;
    let (trials, _, samples) = dipoles.data().dim();
    let mut out = Array3::zeros((trials, atlas.n_regions(), samples));
    for (mut dst, src) in out.outer_iter_mut().zip(dipoles.data().outer_iter()) {
        dst.assign(&avg.dot(&src));
    }
    dipoles.map_channels(out, atlas.names.clone())
}

/// Regions x channels operator equal to scout-averaging the standardized
/// kernel rows; applying it is identical to `apply_inverse` followed by
/// `scout_average`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoutOperator {
    pub matrix: Array2<f64>,
    pub region_names: Vec<String>,
}

impl ScoutOperator {
    pub fn new(kernel: &SloretaKernel, atlas: &Atlas) -> Result<Self> {
        if atlas.n_dipoles() != kernel.n_dipoles() {
            return Err(Error::Dimension {
                what: "atlas dipoles vs inverse kernel",
                expected: kernel.n_dipoles(),
                actual: atlas.n_dipoles(),
            });
        }
        Ok(Self {
            matrix: atlas.averaging_matrix()?.dot(&kernel.standardized),
            region_names: atlas.names.clone(),
        })
    }

    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        if rec.n_channels() != self.matrix.ncols() {
            return Err(Error::Dimension {
                what: "recording channels vs scout operator",
                expected: self.matrix.ncols(),
                actual: rec.n_channels(),
            });
        }
        let positions = crate::signal::abstract_montage("s", self.region_names.len())
            .positions()
            .to_vec();
        let montage = Montage::new(self.region_names.clone(), positions)?;
        rec.derived(self.matrix.dot(rec.data()), montage)
    }
}

/// Smooth random forward model: point-dipole potentials from dipoles inside
/// a unit head to electrodes on a cap, a small isotropic component keeping
/// `L Lᵀ` well conditioned, rows average-referenced.
pub fn synth_leadfield(channels: usize, dipoles: usize, seed: u64) -> Result<LeadField> {
    if dipoles < channels {
        return Err(Error::invalid(format!("{dipoles} dipoles < {channels} channels")));
    }
    let electrodes = Montage::for_channels(channels)?.unit_vectors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(dipoles);
    let mut moments = Vec::with_capacity(dipoles);
    while positions.len() < dipoles {
        let p = [
            rng.gen_range(-0.75..0.75),
            rng.gen_range(-0.75..0.75),
            rng.gen_range(-0.2..0.75),
        ];
        let r2: f64 = p.iter().map(|v| v * v).sum();
        if r2 > 0.75 * 0.75 {
            continue;
        }
        let m: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        positions.push(p);
        moments.push(m.map(|v| v / norm));
    }
    let mut matrix = Array2::zeros((channels, dipoles));
    for (c, e) in electrodes.iter().enumerate() {
        for (d, (p, m)) in positions.iter().zip(&moments).enumerate() {
            let r = [e[0] - p[0], e[1] - p[1], e[2] - p[2]];
            let dist = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = (0..3).map(|i| m[i] * r[i]).sum();
            matrix[[c, d]] = dot / dist.powi(3);
        }
    }
    let scale = matrix.iter().map(|v| v.abs()).sum::<f64>() / matrix.len() as f64;
    for v in matrix.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += 0.1 * scale * n;
    }
    let mean = matrix.mean_axis(Axis(0)).expect("non-empty");
    for mut row in matrix.rows_mut() {
        row -= &mean;
    }
    LeadField::new(matrix, Some(positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn epochs_of(data: Array3<f64>) -> EpochSet {
        let (t, c, s) = data.dim();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        EpochSet::new(data, vec![0; t], 100.0, (0.0, s as f64 / 100.0), names).unwrap()
    }

    #[test]
    fn identity_lead_field_peaks_at_active_dipole() {
        let lf = LeadField::new(Array2::eye(3), None).unwrap();
        let k = sloreta_kernel(&lf, 0.0).unwrap();
        let v = array![0.0, 5.0, 0.0];
        let s = k.standardized.dot(&v);
        let power: Vec<f64> = s.iter().map(|x| x * x).collect();
        let best = (0..3).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn kernel_norm_shrinks_with_lambda() {
        let lf = synth_leadfield(16, 60, 3).unwrap();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4, 1e6] {
            let k = sloreta_kernel(&lf, lambda).unwrap();
            let norm = k.minimum_norm.mapv(|v| v * v).sum().sqrt();
            assert!(norm < last, "lambda {lambda}: {norm} !< {last}");
            last = norm;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn resolution_diagonal_positive() {
        let lf = synth_leadfield(31, 300, 1).unwrap();
        let k = sloreta_kernel(&lf, default_lambda(&lf, 3.0)).unwrap();
        assert!(k.resolution.iter().all(|&r| r > 0.0));
    }

    #[test]
    fn rank_collapse_is_singular() {
        // one dipole seen by four channels: rank 1 on a 3-dim referenced subspace
        let lf = LeadField::new(Array2::from_shape_fn((4, 1), |(c, _)| (c + 1) as f64), None).unwrap();
        assert!(matches!(sloreta_kernel(&lf, 0.0), Err(Error::Singular(_))));
        assert!(sloreta_kernel(&lf, 1.0).is_ok());
    }

    #[test]
    fn apply_inverse_zero_and_linear() {
        let lf = synth_leadfield(8, 40, 2).unwrap();
        let k = sloreta_kernel(&lf, 0.5).unwrap();
        let zero = epochs_of(Array3::zeros((2, 8, 10)));
        assert!(apply_inverse(&k, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array3::from_shape_fn((2, 8, 10), |_| rng.gen_range(-1.0..1.0));
        let b = Array3::from_shape_fn((2, 8, 10), |_| rng.gen_range(-1.0..1.0));
        let lhs = apply_inverse(&k, &epochs_of(&a * 2.0 - &b * 3.0)).unwrap();
        let ra = apply_inverse(&k, &epochs_of(a)).unwrap();
        let rb = apply_inverse(&k, &epochs_of(b)).unwrap();
        let rhs = ra.data() * 2.0 - rb.data() * 3.0;
        for (x, y) in lhs.data().iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert!(apply_inverse(&k, &epochs_of(Array3::zeros((1, 7, 10)))).is_err());
    }

    #[test]
    fn scout_average_rules() {
        let series = Array3::from_shape_fn((1, 4, 5), |(_, d, t)| (d * 10 + t) as f64);
        let e = epochs_of(series.clone());
        let all = Atlas::new(vec![0; 4], vec!["all".into()]).unwrap();
        let out = scout_average(&e, &all).unwrap();
        let mean: Array1<f64> = series.index_axis(Axis(0), 0).mean_axis(Axis(0)).unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(out.data()[[0, 0, t]], mean[t], epsilon = 1e-12);
        }

        let x = Array3::from_shape_fn((1, 2, 5), |(_, d, t)| if d == 0 { t as f64 } else { -(t as f64) });
        let cancel = scout_average(&epochs_of(x), &Atlas::new(vec![0, 0], vec!["r".into()]).unwrap()).unwrap();
        assert!(cancel.data().iter().all(|&v| v == 0.0));

        let gap = Atlas::new(vec![0, 0, 2, 2], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        match scout_average(&e, &gap) {
            Err(Error::EmptyRegion(names)) => assert_eq!(names, vec!["b".to_string()]),
            other => panic!("expected empty region error, got {other:?}"),
        }
    }

    #[test]
    fn scout_operator_matches_two_step_path() {
        let lf = synth_leadfield(10, 50, 5).unwrap();
        let atlas = Atlas::nearest_centers(lf.positions().unwrap(), 6).unwrap();
        let k = sloreta_kernel(&lf, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = epochs_of(Array3::from_shape_fn((3, 10, 20), |_| rng.gen_range(-1.0..1.0)));
        let two_step = scout_average(&apply_inverse(&k, &e).unwrap(), &atlas).unwrap();
        let op = ScoutOperator::new(&k, &atlas).unwrap();
        for t in 0..3 {
            let direct = op.matrix.dot(&e.data().index_axis(Axis(0), t));
            for (a, b) in direct.iter().zip(two_step.data().index_axis(Axis(0), t).iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn synthetic_lead_field_properties() {
        let lf = synth_leadfield(31, 300, 9).unwrap();
        for col in lf.matrix().columns() {
            assert_abs_diff_eq!(col.sum(), 0.0, epsilon = 1e-10);
        }
        assert_eq!(lf, synth_leadfield(31, 300, 9).unwrap());
        assert_ne!(lf, synth_leadfield(31, 300, 10).unwrap());
        assert!(synth_leadfield(31, 30, 1).is_err());
    }
}

//! 4-D positional encoding: Fourier features over every combination of
//! integer frequencies on (x, y, z, t), plus a learned linear branch, merged
//! under LayerNorm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourierConfig {
    pub n_freq: usize,
    /// Multiplier applied to the 1-based patch index.
    pub s_t: f64,
    /// Half-width in cm of the cube mapped onto [0, 1]³.
    pub spatial_box: f64,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self {
            n_freq: 4,
            s_t: 1.0 / 32.0,
            spatial_box: 15.0,
        }
    }
}

impl FourierConfig {
    /// Full feature width, 2·n_freq⁴.
    pub fn full_width(&self) -> usize {
        2 * self.n_freq.pow(4)
    }

    /// Checks the pairing with an embedding width. The production sizes use
    /// n_freq ∈ {3, 4, 5} with 2·n_freq⁴ = dim exactly; narrower desk models
    /// keep the first dim/2 cosine and dim/2 sine features.
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut v = Vec::new();
        if !(1..=8).contains(&self.n_freq) {
            v.push(format!("n_freq {} must be in 1..=8", self.n_freq));
        } else if dim % 2 != 0 || dim > self.full_width() || dim == 0 {
            v.push(format!(
                "dim {dim} must be even, positive and at most 2*n_freq^4 = {}",
                self.full_width()
            ));
        }
        if !(self.s_t > 0.0 && self.s_t.is_finite()) {
            v.push(format!("s_t {} must be positive", self.s_t));
        }
        if !(self.spatial_box > 0.0 && self.spatial_box.is_finite()) {
            v.push(format!("spatial_box {} must be positive", self.spatial_box));
        }
        v
    }
}

/// Normalised (x̃, ỹ, z̃, t̃) for every token, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedPositions {
    pub coords: Vec<[f64; 4]>,
    pub n_channels: usize,
    pub n_patches: usize,
}

impl ExtendedPositions {
    pub fn get(&self, c: usize, k: usize) -> [f64; 4] {
        self.coords[c * self.n_patches + k]
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self.coords.iter().flatten().map(|&v| F::of(v)).collect();
        Tensor::from_vec(self.coords.len(), 4, data)
    }

    /// Subset of tokens, in the order given by flat indices.
    pub fn select(&self, index: &[usize]) -> Vec<[f64; 4]> {
        index.iter().map(|&i| self.coords[i]).collect()
    }
}

pub fn extend_positions(positions: &[[f64; 3]], p: usize, cfg: &FourierConfig) -> Result<ExtendedPositions> {
    let b = cfg.spatial_box;
    for (c, pos) in positions.iter().enumerate() {
        if pos.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("position of channel {c}")));
        }
        if pos.iter().any(|v| v.abs() > 2.0 * b) {
            return Err(invalid(format!(
                "position {pos:?} of channel {c} lies outside twice the ±{b} cm box; coordinates must be in cm"
            )));
        }
    }
    let mut coords = Vec::with_capacity(positions.len() * p);
    for pos in positions {
        let s = pos.map(|v| (v + b) / (2.0 * b));
        for t in 1..=p {
            coords.push([s[0], s[1], s[2], t as f64 * cfg.s_t]);
        }
    }
    Ok(ExtendedPositions {
        coords,
        n_channels: positions.len(),
        n_patches: p,
    })
}

/// Frequency tuple of flat index m = i + j·n + k·n² + l·n³.
pub fn frequency_index(m: usize, n: usize) -> [usize; 4] {
    [m % n, (m / n) % n, (m / (n * n)) % n, (m / (n * n * n)) % n]
}

/// Rows of `[cos θ_0 .. cos θ_{h-1}, sin θ_0 .. sin θ_{h-1}]` with
/// h = width/2 and θ_m = 2π(i·x̃ + j·ỹ + k·z̃ + l·t̃).
pub fn fourier_encode_coords(coords: &[[f64; 4]], n_freq: usize, width: usize) -> Tensor<f64> {
    let h = width / 2;
    assert!(h <= n_freq.pow(4), "fourier width exceeds 2*n_freq^4");
    let freqs: Vec<[f64; 4]> = (0..h)
        .map(|m| frequency_index(m, n_freq).map(|f| f as f64))
        .collect();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Tensor::zeros(coords.len(), 2 * h);
    for (r, x) in coords.iter().enumerate() {
        let row = out.row_mut(r);
        for (m, f) in freqs.iter().enumerate() {
            let theta = tau * (f[0] * x[0] + f[1] * x[1] + f[2] * x[2] + f[3] * x[3]);
            row[m] = theta.cos();
            row[h + m] = theta.sin();
        }
    }
    out
}

pub fn fourier_encode(ext: &ExtendedPositions, cfg: &FourierConfig) -> Tensor<f64> {
    fourier_encode_coords(&ext.coords, cfg.n_freq, cfg.full_width())
}

/// Graph handles of the learned part of the encoding.
#[derive(Clone, Copy, Debug)]
pub struct PosEncVars {
    /// 4×D, no bias.
    pub linear: Var,
    pub branch_gain: Var,
    pub branch_offset: Var,
    pub out_gain: Var,
    pub out_offset: Var,
}

/// `LayerNorm(F_pe + LayerNorm(GELU(ext·W)))` on the graph.
pub fn combine_graph<F: Real>(g: &mut Graph<F>, fourier: Var, ext: Var, p: &PosEncVars) -> Var {
    let eps = F::of(LN_EPS);
    let lin = g.matmul(ext, p.linear);
    let act = g.gelu(lin);
    let branch = g.layernorm(act, Some(p.branch_gain), Some(p.branch_offset), eps);
    let sum = g.add(fourier, branch);
    g.layernorm(sum, Some(p.out_gain), Some(p.out_offset), eps)
}

/// Parameter values of the learned part, for use outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncParams<F> {
    pub linear: Tensor<F>,
    pub branch_gain: Tensor<F>,
    pub branch_offset: Tensor<F>,
    pub out_gain: Tensor<F>,
    pub out_offset: Tensor<F>,
}

impl<F: Real> PosEncParams<F> {
    /// Zero linear branch with identity LayerNorm affines.
    pub fn identity(dim: usize) -> Self {
        Self {
            linear: Tensor::zeros(4, dim),
            branch_gain: Tensor::full(1, dim, F::one()),
            branch_offset: Tensor::zeros(1, dim),
            out_gain: Tensor::full(1, dim, F::one()),
            out_offset: Tensor::zeros(1, dim),
        }
    }
}

pub fn combine<F: Real>(fourier: &Tensor<F>, ext: &ExtendedPositions, params: &PosEncParams<F>) -> Result<Tensor<F>> {
    let d = params.linear.cols();
    if fourier.cols() != d || fourier.rows() != ext.coords.len() || params.linear.rows() != 4 {
        return Err(Error::Shape(format!(
            "fourier {:?}, {} tokens, linear {:?}",
            fourier.shape(),
            ext.coords.len(),
            params.linear.shape()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(fourier.clone());
    let e = g.constant(ext.to_tensor());
    let vars = PosEncVars {
        linear: g.constant(params.linear.clone()),
        branch_gain: g.constant(params.branch_gain.clone()),
        branch_offset: g.constant(params.branch_offset.clone()),
        out_gain: g.constant(params.out_gain.clone()),
        out_offset: g.constant(params.out_offset.clone()),
    };
    let out = combine_graph(&mut g, f, e, &vars);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::L1Reduction;
    use proptest::prelude::*;

    fn cfg(n: usize) -> FourierConfig {
        FourierConfig {
            n_freq: n,
            ..FourierConfig::default()
        }
    }

    #[test]
    fn box_center_maps_to_half() {
        let e = extend_positions(&[[0.0, 0.0, 0.0]], 1, &FourierConfig::default()).unwrap();
        assert_eq!(e.coords[0], [0.5, 0.5, 0.5, 1.0 / 32.0]);
    }

    #[test]
    fn temporal_axis_and_extension() {
        let c = FourierConfig::default();
        let pos = [[1.0, -2.0, 3.0], [4.0, 5.0, -6.0]];
        let e = extend_positions(&pos, 11, &c).unwrap();
        assert_eq!(e.get(0, 0)[3], 1.0 / 32.0);
        assert_eq!(e.get(1, 10)[3], 11.0 / 32.0);
        let e2 = extend_positions(&pos, 22, &c).unwrap();
        for ch in 0..2 {
            for k in 0..11 {
                assert_eq!(e.get(ch, k), e2.get(ch, k));
            }
            assert_eq!(e.get(ch, 0)[..3], e2.get(ch, 21)[..3]);
        }
    }

    #[test]
    fn out_of_box_coordinates_are_rejected() {
        let c = FourierConfig::default();
        assert!(extend_positions(&[[0.0, 0.0, 31.0]], 3, &c).is_err());
        assert!(extend_positions(&[[0.0, 0.0, 90.0]], 3, &c).is_err());
        assert!(extend_positions(&[[0.0, f64::NAN, 0.0]], 3, &c).is_err());
        assert!(extend_positions(&[[0.0, 0.0, 29.0]], 3, &c).is_ok());
    }

    #[test]
    fn widths_for_production_sizes() {
        for (n, w) in [(3, 162), (4, 512), (5, 1250)] {
            let e = extend_positions(&[[1.0, 2.0, 3.0]], 2, &cfg(n)).unwrap();
            assert_eq!(fourier_encode(&e, &cfg(n)).cols(), w);
        }
    }

    #[test]
    fn zero_coordinates_give_unit_cosines() {
        let f = fourier_encode_coords(&[[0.0; 4]], 4, 512);
        assert!(f.row(0)[..256].iter().all(|&v| v == 1.0));
        assert!(f.row(0)[256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn index_map_periodicity() {
        let n: usize = 4;
        for m in 0..n.pow(4) {
            let f = frequency_index(m, n);
            assert_eq!(f[0], frequency_index(m + n, n)[0]);
            assert_eq!(f[1], frequency_index((m + n * n) % n.pow(4), n)[1]);
            assert_eq!(f[2], frequency_index((m + n.pow(3)) % n.pow(4), n)[2]);
            assert_eq!(f, frequency_index(m + n.pow(4), n));
            assert_eq!(m, f[0] + f[1] * n + f[2] * n * n + f[3] * n * n * n);
        }
    }

    #[test]
    fn truncation_keeps_leading_frequencies() {
        let x = [[0.3, 0.1, 0.7, 0.2]];
        let full = fourier_encode_coords(&x, 2, 32);
        let narrow = fourier_encode_coords(&x, 2, 16);
        assert_eq!(&full.row(0)[..8], &narrow.row(0)[..8]);
        assert_eq!(&full.row(0)[16..24], &narrow.row(0)[8..]);
    }

    #[test]
    fn branch_off_is_plain_layernorm() {
        let c = cfg(2);
        let e = extend_positions(&[[3.0, -1.0, 7.0], [0.0, 9.0, 0.0]], 3, &c).unwrap();
        let f = fourier_encode(&e, &c);
        let out = combine(&f, &e, &PosEncParams::identity(32)).unwrap();
        for r in 0..out.rows() {
            let row = f.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            for (o, v) in out.row(r).iter().zip(row) {
                assert!((o - (v - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combined_rows_are_standardised() {
        let c = cfg(4);
        let e = extend_positions(&[[3.0, -1.0, 7.0], [-6.0, 2.0, 4.0]], 5, &c).unwrap();
        let f = fourier_encode(&e, &c);
        let mut p = PosEncParams::<f64>::identity(512);
        for (i, v) in p.linear.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64 / 50.0) - 1.0;
        }
        let out = combine(&f, &e, &p).unwrap();
        for r in 0..out.rows() {
            let mean = out.row(r).iter().sum::<f64>() / 512.0;
            let var = out.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 512.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(combine(&f, &e, &PosEncParams::identity(256)).is_err());
    }

    #[test]
    fn linear_branch_gradient_matches_finite_differences() {
        let c = cfg(2);
        let e = extend_positions(&[[3.0, -1.0, 7.0], [-6.0, 2.0, 4.0]], 2, &c).unwrap();
        let f = fourier_encode(&e, &c);
        let mut w = Tensor::<f64>::zeros(4, 32);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i * 13 % 29) as f64 / 14.0) - 1.0;
        }
        let target = Tensor::from_vec(4, 32, (0..128).map(|i| (i as f64 * 0.37).sin()).collect());
        let loss_at = |w: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let ev = g.constant(e.to_tensor());
            let lin = g.param(w.clone());
            let p = PosEncParams::<f64>::identity(32);
            let vars = PosEncVars {
                linear: lin,
                branch_gain: g.constant(p.branch_gain),
                branch_offset: g.constant(p.branch_offset),
                out_gain: g.constant(p.out_gain),
                out_offset: g.constant(p.out_offset),
            };
            let out = combine_graph(&mut g, fv, ev, &vars);
            let l = g.l1_loss(out, &target, L1Reduction::SampleMean);
            let grads = g.backward(l);
            (g.scalar(l), grads.get(lin).unwrap().clone())
        };
        let (_, grad) = loss_at(&w);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss_at(&wp).0 - loss_at(&wm).0) / (2.0 * h);
            let a = grad.data()[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3), "{i}: {fd} vs {a}");
        }
    }

    proptest! {
        #[test]
        fn integer_shift_is_periodic(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, t in 0.0f64..1.0, axis in 0usize..4) {
            let a = [x, y, z, t];
            let mut b = a;
            b[axis] += 1.0;
            let fa = fourier_encode_coords(&[a], 4, 512);
            let fb = fourier_encode_coords(&[b], 4, 512);
            prop_assert!(fa.max_abs_diff(&fb) < 1e-9);
            prop_assert!(fa.data().iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn features_are_lipschitz(x in prop::array::uniform4(0.0f64..1.0), d in prop::array::uniform4(-0.01f64..0.01)) {
            let n = 4;
            let y = [x[0] + d[0], x[1] + d[1], x[2] + d[2], x[3] + d[3]];
            let step = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let fx = fourier_encode_coords(&[x], n, 512);
            let fy = fourier_encode_coords(&[y], n, 512);
            let bound = 2.0 * std::f64::consts::PI * 4.0 * (n - 1) as f64 * step;
            prop_assert!(fx.max_abs_diff(&fy) <= bound + 1e-12);
        }

        #[test]
        fn channel_permutation_permutes_rows(seed in 0u64..1000) {
            let c = FourierConfig::default();
            let pos: Vec<[f64; 3]> = (0..5).map(|i| {
                let s = (seed as f64 + i as f64) * 0.7;
                [9.0 * s.sin(), 9.0 * s.cos(), (s * 3.0).sin() * 5.0]
            }).collect();
            let perm = [3usize, 0, 4, 1, 2];
            let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| pos[i]).collect();
            let a = fourier_encode(&extend_positions(&pos, 3, &c).unwrap(), &c);
            let b = fourier_encode(&extend_positions(&permuted, 3, &c).unwrap(), &c);
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..3 {
                    prop_assert_eq!(b.row(new * 3 + k), a.row(old * 3 + k));
                }
            }
        }
    }
}

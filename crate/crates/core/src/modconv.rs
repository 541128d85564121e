//! Weight algebra of a modulated convolution: style modulation, demodulation,
//! and the per-input-channel domain modulation, together with the forward
//! and backward passes that apply the transformed kernel.
//!
//! The weight pipeline is always `modulate → domain_modulate → demodulate`.
//! Both modulations scale input channels, so their relative order does not
//! matter, but demodulation runs last so that the domain scaling takes part
//! in the per-output-channel normalization.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, Zip};

use crate::conv::{col2im, im2col};
use crate::error::{shape_err, Error, Result};

/// Convolution kernel of shape (out_channels, in_channels, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight {
    values: Array4<f64>,
}

impl ConvWeight {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (o, i, kh, kw) = values.dim();
        if o == 0 || i == 0 {
            return Err(shape_err(
                "convolution weight needs at least one input and output channel",
            ));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(shape_err(format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("convolution weight has non-finite entries".into()));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn kernel_size(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array4<f64> {
        &mut self.values
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.values
    }

    fn as_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, i, k, _) = self.values.dim();
        self.values.view().into_shape_with_order((o, i * k * k)).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModConvConfig {
    /// Stabilizer inside the demodulation square root.
    pub epsilon: f64,
    pub demodulate: bool,
}

impl Default for ModConvConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            demodulate: true,
        }
    }
}

impl ModConvConfig {
    /// Configuration used by toRGB layers: modulation only.
    pub fn to_rgb() -> Self {
        Self {
            demodulate: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "demodulation epsilon must be positive, got {}",
                self.epsilon
            )))
        }
    }
}

fn check_channel_vector(w: &ConvWeight, v: &[f64], what: &str) -> Result<()> {
    if v.len() != w.in_channels() {
        return Err(shape_err(format!(
            "{what} has length {} but the weight has {} input channels",
            v.len(),
            w.in_channels()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn scale_inputs(w: &ConvWeight, scale: &[f64]) -> ConvWeight {
    let mut values = w.values.clone();
    for (i, mut lane) in values.axis_iter_mut(Axis(1)).enumerate() {
        lane.mapv_inplace(|v| v * scale[i]);
    }
    ConvWeight { values }
}

/// Style modulation: `w'[j, i, ..] = s[i] · w[j, i, ..]`.
pub fn modulate(w: &ConvWeight, s: &[f64]) -> Result<ConvWeight> {
    check_channel_vector(w, s, "style slice")?;
    Ok(scale_inputs(w, s))
}

/// Domain modulation: `w'[j, i, ..] = d[i] · w[j, i, ..]`.
pub fn domain_modulate(w: &ConvWeight, d: &[f64]) -> Result<ConvWeight> {
    check_channel_vector(w, d, "domain slice")?;
    Ok(scale_inputs(w, d))
}

/// Normalizes every output channel by `sqrt(Σ_{i,k} w'² + ε)`.
///
/// An all-zero row stays all-zero. When `cfg.demodulate` is false the weight
/// is returned unchanged.
pub fn demodulate(w_prime: &ConvWeight, cfg: &ModConvConfig) -> ConvWeight {
    if !cfg.demodulate {
        return w_prime.clone();
    }
    let mut values = w_prime.values.clone();
    for mut row in values.axis_iter_mut(Axis(0)) {
        let sigma = (row.iter().map(|v| v * v).sum::<f64>() + cfg.epsilon).sqrt();
        row.mapv_inplace(|v| v / sigma);
    }
    ConvWeight { values }
}

/// Full weight pipeline: modulate by `s`, domain-modulate by `d` if given,
/// then demodulate if configured.
pub fn transform_weight(w: &ConvWeight, s: &[f64], d: Option<&[f64]>, cfg: &ModConvConfig) -> Result<ConvWeight> {
    cfg.validate()?;
    let mut out = modulate(w, s)?;
    if let Some(d) = d {
        out = domain_modulate(&out, d)?;
    }
    Ok(demodulate(&out, cfg))
}

fn check_feature_map(shape: (usize, usize, usize), w: &ConvWeight) -> Result<()> {
    let (c, h, wd) = shape;
    if c != w.in_channels() {
        return Err(shape_err(format!(
            "feature map has {c} channels but the weight expects {}",
            w.in_channels()
        )));
    }
    if !h.is_power_of_two() || !wd.is_power_of_two() {
        return Err(shape_err(format!("spatial dims must be powers of two, got {h}x{wd}")));
    }
    Ok(())
}

/// Applies a modulated convolution (stride 1, zero padding k/2) to a batch
/// (n, c, h, w). Every sample shares the style `s` and domain slice `d`.
/// An absent `d` behaves exactly like an all-ones slice.
pub fn mod_conv_forward(
    x: &Array4<f64>,
    w: &ConvWeight,
    s: &[f64],
    d: Option<&[f64]>,
    cfg: &ModConvConfig,
) -> Result<Array4<f64>> {
    let (n, c, h, wd) = x.dim();
    check_feature_map((c, h, wd), w)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("feature map has non-finite entries".into()));
    }
    let kernel = transform_weight(w, s, d, cfg)?;
    let mut out = Array4::<f64>::zeros((n, w.out_channels(), h, wd));
    for (sample, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&apply_kernel(sample, &kernel).0);
    }
    Ok(out)
}

fn apply_kernel(x: ArrayView3<f64>, kernel: &ConvWeight) -> (Array3<f64>, Array2<f64>) {
    let (_, h, wd) = x.dim();
    let cols = im2col(x, kernel.kernel_size());
    let y = kernel.as_matrix().dot(&cols);
    let y = y.into_shape_with_order((kernel.out_channels(), h, wd)).unwrap();
    (y, cols)
}

/// Saved forward state of a single-sample modulated convolution.
#[derive(Clone, Debug)]
pub struct ModConvTape {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    style: Vec<f64>,
    domain: Option<Vec<f64>>,
    /// Weight after both modulations, before demodulation.
    modulated: Array4<f64>,
    /// Per output channel `sqrt(Σ w'² + ε)`; absent without demodulation.
    sigma: Option<Vec<f64>>,
    kernel: ConvWeight,
}

/// Gradients of a scalar objective with respect to every input of a
/// modulated convolution.
#[derive(Clone, Debug)]
pub struct ModConvGrads {
    pub input: Array3<f64>,
    pub style: Vec<f64>,
    /// Gradient w.r.t. the domain slice (evaluated at all-ones when absent).
    pub domain: Vec<f64>,
    pub weight: Array4<f64>,
}

/// Single-sample forward that records what [`ModConvTape::backward`] needs.
pub fn mod_conv_traced(
    x: ArrayView3<f64>,
    w: &ConvWeight,
    s: &[f64],
    d: Option<&[f64]>,
    cfg: &ModConvConfig,
) -> Result<(Array3<f64>, ModConvTape)> {
    check_feature_map(x.dim(), w)?;
    cfg.validate()?;
    check_channel_vector(w, s, "style slice")?;
    if let Some(d) = d {
        check_channel_vector(w, d, "domain slice")?;
    }
    let mut modulated = scale_inputs(w, s);
    if let Some(d) = d {
        modulated = scale_inputs(&modulated, d);
    }
    let (kernel, sigma) = if cfg.demodulate {
        let mut values = modulated.values.clone();
        let mut sigma = Vec::with_capacity(w.out_channels());
        for mut row in values.axis_iter_mut(Axis(0)) {
            let sg = (row.iter().map(|v| v * v).sum::<f64>() + cfg.epsilon).sqrt();
            row.mapv_inplace(|v| v / sg);
            sigma.push(sg);
        }
        (ConvWeight { values }, Some(sigma))
    } else {
        (modulated.clone(), None)
    };
    let (y, cols) = apply_kernel(x, &kernel);
    let tape = ModConvTape {
        cols,
        in_shape: x.dim(),
        style: s.to_vec(),
        domain: d.map(<[f64]>::to_vec),
        modulated: modulated.values,
        sigma,
        kernel,
    };
    Ok((y, tape))
}

impl ModConvTape {
    /// Pulls `grad_out` (out_channels, h, w) back through the convolution and
    /// the weight pipeline. `w` must be the base weight used in the forward.
    pub fn backward(&self, w: &ConvWeight, grad_out: ArrayView3<f64>) -> ModConvGrads {
        let (c, h, wd) = self.in_shape;
        let o = self.kernel.out_channels();
        let k = self.kernel.kernel_size();
        let dy = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, h * wd))
            .unwrap();

        let dcols = self.kernel.as_matrix().t().dot(&dy);
        let input = col2im(dcols.view(), c, h, wd, k);

        // dL/d(kernel) as (o, c, k, k)
        let dkernel = dy.dot(&self.cols.t()).into_shape_with_order((o, c, k, k)).unwrap();

        let dmod = match &self.sigma {
            Some(sigma) => {
                let mut dmod = dkernel;
                for ((mut g, wm), &sg) in dmod
                    .axis_iter_mut(Axis(0))
                    .zip(self.modulated.axis_iter(Axis(0)))
                    .zip(sigma)
                {
                    let inner: f64 = Zip::from(&g).and(&wm).fold(0.0, |acc, a, b| acc + a * b);
                    let s3 = sg * sg * sg;
                    Zip::from(&mut g).and(&wm).for_each(|gv, &wv| {
                        *gv = *gv / sg - wv * inner / s3;
                    });
                }
                dmod
            }
            None => dkernel,
        };

        let ones;
        let dom = match &self.domain {
            Some(d) => d.as_slice(),
            None => {
                ones = vec![1.0; c];
                ones.as_slice()
            }
        };

        let mut style = vec![0.0; c];
        let mut domain = vec![0.0; c];
        let mut weight = dmod.clone();
        for i in 0..c {
            let g = dmod.index_axis(Axis(1), i);
            let base = w.values.index_axis(Axis(1), i);
            let dscale: f64 = Zip::from(&g).and(&base).fold(0.0, |acc, a, b| acc + a * b);
            style[i] = dscale * dom[i];
            domain[i] = dscale * self.style[i];
            weight
                .index_axis_mut(Axis(1), i)
                .mapv_inplace(|v| v * self.style[i] * dom[i]);
        }
        ModConvGrads {
            input,
            style,
            domain,
            weight,
        }
    }

    pub fn kernel(&self) -> &ConvWeight {
        &self.kernel
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_naive;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn modulate_scales_input_channels() {
        let w = ConvWeight::new(array![[[[1.0]], [[3.0]]]]).unwrap();
        let out = modulate(&w, &[2.0, 0.5]).unwrap();
        assert_eq!(out.values(), &array![[[[2.0]], [[1.5]]]]);
        let same = domain_modulate(&w, &[2.0, 0.5]).unwrap();
        assert_eq!(same, out);
    }

    #[test]
    fn unit_modulation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ConvWeight::new(random4(&mut rng, (4, 3, 3, 3))).unwrap();
        assert_eq!(modulate(&w, &[1.0; 3]).unwrap(), w);
        assert_eq!(domain_modulate(&w, &[1.0; 3]).unwrap(), w);
    }

    #[test]
    fn modulate_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random4(&mut rng, (4, 3, 3, 3));
        let s = random_vec(&mut rng, 3, -2.0, 2.0);
        let out = modulate(&ConvWeight::new(raw.clone()).unwrap(), &s).unwrap();
        for j in 0..4 {
            for i in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        assert_eq!(out.values()[[j, i, ky, kx]], s[i] * raw[[j, i, ky, kx]]);
                    }
                }
            }
        }
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let w = ConvWeight::new(Array4::zeros((2, 3, 1, 1))).unwrap();
        assert!(matches!(modulate(&w, &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(domain_modulate(&w, &[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_kernel_rejected() {
        assert!(ConvWeight::new(Array4::zeros((2, 3, 5, 5))).is_err());
        assert!(ConvWeight::new(Array4::zeros((0, 3, 1, 1))).is_err());
    }

    #[test]
    fn demodulate_three_four_five() {
        let w = ConvWeight::new(array![[[[3.0]], [[4.0]]]]).unwrap();
        let cfg = ModConvConfig {
            epsilon: 1e-300,
            demodulate: true,
        };
        let out = demodulate(&w, &cfg);
        assert!((out.values()[[0, 0, 0, 0]] - 0.6).abs() < 1e-15);
        assert!((out.values()[[0, 1, 0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn demodulate_zero_row_stays_zero() {
        let w = ConvWeight::new(Array4::zeros((2, 3, 3, 3))).unwrap();
        let out = demodulate(&w, &ModConvConfig::default());
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn demodulated_rows_have_unit_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ConvWeight::new(random4(&mut rng, (4, 3, 3, 3))).unwrap();
        let out = demodulate(&w, &ModConvConfig::default());
        for row in out.values().outer_iter() {
            let energy: f64 = row.iter().map(|v| v * v).sum();
            assert!((1.0 - 1e-4..=1.0).contains(&energy), "{energy}");
        }
    }

    #[test]
    fn zero_epsilon_rejected() {
        let w = ConvWeight::new(Array4::ones((1, 1, 1, 1))).unwrap();
        let cfg = ModConvConfig {
            epsilon: 0.0,
            demodulate: true,
        };
        assert!(matches!(
            transform_weight(&w, &[1.0], None, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scalar_forward_without_demodulation() {
        let w = ConvWeight::new(array![[[[1.5]]]]).unwrap();
        let x = Array4::from_elem((1, 1, 2, 2), -0.4);
        let cfg = ModConvConfig::to_rgb();
        let y = mod_conv_forward(&x, &w, &[2.0], Some(&[3.0]), &cfg).unwrap();
        for v in y.iter() {
            assert!((v - 2.0 * 3.0 * 1.5 * -0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn absent_domain_equals_all_ones_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ConvWeight::new(random4(&mut rng, (4, 3, 3, 3))).unwrap();
        let x = random4(&mut rng, (2, 3, 8, 8));
        let s = random_vec(&mut rng, 3, 0.5, 1.5);
        for cfg in [ModConvConfig::default(), ModConvConfig::to_rgb()] {
            let a = mod_conv_forward(&x, &w, &s, None, &cfg).unwrap();
            let b = mod_conv_forward(&x, &w, &s, Some(&[1.0; 3]), &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_matches_naive_convolution_of_transformed_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = random4(&mut rng, (4, 3, 3, 3));
        let x = random4(&mut rng, (2, 3, 8, 4));
        let s = random_vec(&mut rng, 3, 0.5, 1.5);
        let d = random_vec(&mut rng, 3, 0.5, 1.5);
        let cfg = ModConvConfig::default();
        let w = ConvWeight::new(raw.clone()).unwrap();
        let y = mod_conv_forward(&x, &w, &s, Some(&d), &cfg).unwrap();

        // explicit transform by loops
        let mut wt = raw.clone();
        for j in 0..4 {
            let mut energy = 0.0;
            for i in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = raw[[j, i, ky, kx]] * s[i] * d[i];
                        wt[[j, i, ky, kx]] = v;
                        energy += v * v;
                    }
                }
            }
            let sg = (energy + 1e-8).sqrt();
            wt.index_axis_mut(Axis(0), j).mapv_inplace(|v| v / sg);
        }
        for n in 0..2 {
            let reference = conv2d_naive(x.index_axis(Axis(0), n), wt.view());
            let got = y.index_axis(Axis(0), n);
            for (a, b) in got.iter().zip(reference.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let w = ConvWeight::new(Array4::ones((2, 3, 3, 3))).unwrap();
        let x = Array4::zeros((1, 2, 4, 4));
        let r = mod_conv_forward(&x, &w, &[1.0; 3], None, &ModConvConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}

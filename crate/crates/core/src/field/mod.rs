//! The radiance field: a positional-encoding MLP mapping a world position and
//! a unit view direction to a density `σ >= 0` and an RGB color in `(0, 1)`.
//!
//! Architecture (all weights live in one flat parameter vector):
//!
//! ```text
//! enc(x) ─ trunk[0] ─ relu ─ … ─ trunk[H-1] ─ relu ─┬─ density ─ softplus ─ σ
//!                                                   └─ feature ─┐
//!                                              enc(d) ──────────┴─ color_hidden ─ relu ─ color_out ─ sigmoid ─ c
//! ```
//!
//! The view direction enters after the density head, so density is
//! view-independent. `enc(p) = [p, sin(2^k p), cos(2^k p)]` for
//! `k = 0..L`, with the sines of all three coordinates before the cosines.

mod checkpoint;
mod linalg;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot, RngSnapshot,
};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Rgb;
use linalg::{gemm, View};

pub const UNIT_DIRECTION_TOLERANCE: f64 = 1e-4;

/// Samples per parallel work item in batched evaluation.
const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub pe_position_freqs: usize,
    pub pe_direction_freqs: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pe_position_freqs: 10,
            pe_direction_freqs: 4,
            hidden_layers: 4,
            hidden_width: 128,
            init_seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_position_freqs == 0
            || self.pe_direction_freqs == 0
            || self.hidden_layers == 0
            || self.hidden_width == 0
        {
            return Err(Error::InvalidConfig(format!(
                "field counts must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn position_encoding_dim(&self) -> usize {
        3 + 6 * self.pe_position_freqs
    }

    pub fn direction_encoding_dim(&self) -> usize {
        3 + 6 * self.pe_direction_freqs
    }

    pub fn color_width(&self) -> usize {
        (self.hidden_width / 2).max(1)
    }
}

/// Placement of one dense layer inside the flat parameter vector. Weights
/// are stored row-major as `inputs x outputs`, followed by the bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    fn end(&self) -> usize {
        self.bias_offset + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldLayout {
    pub trunk: Vec<LayerLayout>,
    pub density: LayerLayout,
    pub feature: LayerLayout,
    pub color_hidden: LayerLayout,
    pub color_out: LayerLayout,
}

impl FieldLayout {
    pub fn for_config(config: &FieldConfig) -> Self {
        let mut offset = 0;
        let mut layer = |inputs: usize, outputs: usize| {
            let l = LayerLayout {
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            };
            offset = l.end();
            l
        };
        let w = config.hidden_width;
        let trunk = (0..config.hidden_layers)
            .map(|i| {
                let inputs = if i == 0 {
                    config.position_encoding_dim()
                } else {
                    w
                };
                layer(inputs, w)
            })
            .collect();
        let density = layer(w, 1);
        let feature = layer(w, w);
        let color_hidden = layer(w + config.direction_encoding_dim(), config.color_width());
        let color_out = layer(config.color_width(), 3);
        Self {
            trunk,
            density,
            feature,
            color_hidden,
            color_out,
        }
    }

    /// All layers in storage order.
    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut v = self.trunk.clone();
        v.extend([
            self.density,
            self.feature,
            self.color_hidden,
            self.color_out,
        ]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.color_out.end()
    }
}

/// Field parameters: flat values plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFieldParams {
    pub values: Vec<f64>,
    config: FieldConfig,
    layout: FieldLayout,
}

/// Densities and colors for a batch of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldOutput {
    pub densities: Vec<f64>,
    pub colors: Vec<Rgb>,
}

impl FieldOutput {
    fn with_capacity(n: usize) -> Self {
        Self {
            densities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    fn extend(&mut self, other: FieldOutput) {
        self.densities.extend(other.densities);
        self.colors.extend(other.colors);
    }
}

/// Anything the renderer can query for density and color.
pub trait DensityColorField: Sync {
    fn query(&self, positions: &[Vector3<f64>], directions: &[Vector3<f64>])
        -> Result<FieldOutput>;
}

impl DensityColorField for RadianceFieldParams {
    fn query(
        &self,
        positions: &[Vector3<f64>],
        directions: &[Vector3<f64>],
    ) -> Result<FieldOutput> {
        eval_field(self, positions, directions)
    }
}

/// Intermediate activations kept from a forward pass for the backward pass.
pub struct FieldTape {
    n: usize,
    enc_x: Vec<f64>,
    trunk: Vec<Vec<f64>>,
    sigma_raw: Vec<f64>,
    color_in: Vec<f64>,
    color_hidden: Vec<f64>,
    colors: Vec<f64>,
}

impl RadianceFieldParams {
    /// Kaiming-style uniform fan-in initialization seeded by
    /// `config.init_seed`; biases start at zero.
    pub fn init(config: FieldConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.config.init_seed);
        let relu_fed: Vec<LayerLayout> = params
            .layout
            .trunk
            .iter()
            .copied()
            .chain([params.layout.color_hidden])
            .collect();
        for layer in params.layout.layers() {
            let gain = if relu_fed.contains(&layer) { 6.0 } else { 3.0 };
            let bound = (gain / layer.inputs as f64).sqrt();
            for v in &mut params.values[layer.weight_offset..layer.bias_offset] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout::for_config(&config);
        Ok(Self {
            values: vec![0.0; layout.param_count()],
            config,
            layout,
        })
    }

    /// Wraps an existing parameter vector, checking it against the layout.
    pub fn from_values(config: FieldConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout::for_config(&config);
        if values.len() != layout.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a layout of {}",
                values.len(),
                layout.param_count()
            )));
        }
        Ok(Self {
            values,
            config,
            layout,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn weights(&self, l: &LayerLayout) -> View<'_> {
        View::row_major(
            &self.values[l.weight_offset..l.bias_offset],
            l.inputs,
            l.outputs,
        )
    }

    fn dense(&self, l: &LayerLayout, input: View<'_>) -> Vec<f64> {
        let n = input.rows;
        let bias = &self.values[l.bias_offset..l.bias_offset + l.outputs];
        let mut out: Vec<f64> = Vec::with_capacity(n * l.outputs);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(input, self.weights(l), &mut out, 1.0);
        out
    }

    /// Forward pass over one batch without validation, keeping activations.
    pub fn forward_taped(
        &self,
        positions: &[Vector3<f64>],
        directions: &[Vector3<f64>],
    ) -> (FieldOutput, FieldTape) {
        let n = positions.len();
        let cfg = &self.config;
        let dx = cfg.position_encoding_dim();
        let dd = cfg.direction_encoding_dim();
        let w = cfg.hidden_width;

        let mut enc_x = vec![0.0; n * dx];
        for (row, p) in enc_x.chunks_exact_mut(dx).zip(positions) {
            encode(p, cfg.pe_position_freqs, row);
        }

        let mut trunk: Vec<Vec<f64>> = Vec::with_capacity(cfg.hidden_layers);
        for (i, layer) in self.layout.trunk.iter().enumerate() {
            let input = if i == 0 {
                View::row_major(&enc_x, n, dx)
            } else {
                View::row_major(&trunk[i - 1], n, w)
            };
            let mut h = self.dense(layer, input);
            h.iter_mut().for_each(relu);
            trunk.push(h);
        }
        let last = View::row_major(trunk.last().expect("hidden_layers >= 1"), n, w);

        let sigma_raw = self.dense(&self.layout.density, last);
        let feature = self.dense(&self.layout.feature, last);

        let cin = w + dd;
        let mut color_in = vec![0.0; n * cin];
        for (i, (row, d)) in color_in.chunks_exact_mut(cin).zip(directions).enumerate() {
            row[..w].copy_from_slice(&feature[i * w..(i + 1) * w]);
            encode(d, cfg.pe_direction_freqs, &mut row[w..]);
        }
        let mut color_hidden = self.dense(
            &self.layout.color_hidden,
            View::row_major(&color_in, n, cin),
        );
        color_hidden.iter_mut().for_each(relu);
        let mut colors = self.dense(
            &self.layout.color_out,
            View::row_major(&color_hidden, n, cfg.color_width()),
        );
        colors.iter_mut().for_each(|v| *v = sigmoid(*v));

        let output = FieldOutput {
            densities: sigma_raw.iter().map(|&s| softplus(s)).collect(),
            colors: colors.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        };
        let tape = FieldTape {
            n,
            enc_x,
            trunk,
            sigma_raw,
            color_in,
            color_hidden,
            colors,
        };
        (output, tape)
    }

    /// Accumulates `∂⟨cotangent, output⟩/∂params` for a taped batch into
    /// `grad`.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_densities: &[f64],
        d_colors: &[Rgb],
        grad: &mut [f64],
    ) {
        let n = tape.n;
        let cfg = &self.config;
        let w = cfg.hidden_width;
        let wc = cfg.color_width();
        let cin = w + cfg.direction_encoding_dim();
        let lay = &self.layout;

        let d_sigma_raw: Vec<f64> = tape
            .sigma_raw
            .iter()
            .zip(d_densities)
            .map(|(&s, &g)| g * sigmoid(s))
            .collect();
        let d_color_raw: Vec<f64> = tape
            .colors
            .chunks_exact(3)
            .zip(d_colors)
            .flat_map(|(c, g)| [0, 1, 2].map(|k| g[k] * c[k] * (1.0 - c[k])))
            .collect();

        accumulate_layer(
            grad,
            &lay.color_out,
            View::row_major(&tape.color_hidden, n, wc),
            View::row_major(&d_color_raw, n, 3),
        );
        let mut d_hidden = vec![0.0; n * wc];
        gemm(
            View::row_major(&d_color_raw, n, 3),
            self.weights(&lay.color_out).t(),
            &mut d_hidden,
            0.0,
        );
        relu_mask(&mut d_hidden, &tape.color_hidden);

        accumulate_layer(
            grad,
            &lay.color_hidden,
            View::row_major(&tape.color_in, n, cin),
            View::row_major(&d_hidden, n, wc),
        );
        let mut d_color_in = vec![0.0; n * cin];
        gemm(
            View::row_major(&d_hidden, n, wc),
            self.weights(&lay.color_hidden).t(),
            &mut d_color_in,
            0.0,
        );
        let d_feature = View {
            data: &d_color_in,
            rows: n,
            cols: w,
            row_stride: cin,
            col_stride: 1,
        };

        let last = tape.trunk.last().expect("hidden_layers >= 1");
        accumulate_layer(grad, &lay.feature, View::row_major(last, n, w), d_feature);
        accumulate_layer(
            grad,
            &lay.density,
            View::row_major(last, n, w),
            View::row_major(&d_sigma_raw, n, 1),
        );

        let mut d_h = vec![0.0; n * w];
        gemm(d_feature, self.weights(&lay.feature).t(), &mut d_h, 0.0);
        gemm(
            View::row_major(&d_sigma_raw, n, 1),
            self.weights(&lay.density).t(),
            &mut d_h,
            1.0,
        );

        for k in (0..lay.trunk.len()).rev() {
            relu_mask(&mut d_h, &tape.trunk[k]);
            let layer = &lay.trunk[k];
            let input = if k == 0 {
                View::row_major(&tape.enc_x, n, cfg.position_encoding_dim())
            } else {
                View::row_major(&tape.trunk[k - 1], n, w)
            };
            accumulate_layer(grad, layer, input, View::row_major(&d_h, n, w));
            if k > 0 {
                let mut next = vec![0.0; n * w];
                gemm(
                    View::row_major(&d_h, n, w),
                    self.weights(layer).t(),
                    &mut next,
                    0.0,
                );
                d_h = next;
            }
        }
    }
}

fn accumulate_layer(grad: &mut [f64], layer: &LayerLayout, input: View<'_>, d_out: View<'_>) {
    gemm(
        input.t(),
        d_out,
        &mut grad[layer.weight_offset..layer.bias_offset],
        1.0,
    );
    let bias = &mut grad[layer.bias_offset..layer.bias_offset + layer.outputs];
    for r in 0..d_out.rows {
        for (c, b) in bias.iter_mut().enumerate() {
            *b += d_out.data[r * d_out.row_stride + c * d_out.col_stride];
        }
    }
}

fn relu_mask(grad: &mut [f64], activations: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activations) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Writes `[p, sin(2^k p)..., cos(2^k p)...]` per frequency into `out`.
pub fn encode(p: &Vector3<f64>, freqs: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 3 + 6 * freqs);
    out[..3].copy_from_slice(p.as_slice());
    let mut scale = 1.0;
    for k in 0..freqs {
        let base = 3 + 6 * k;
        for i in 0..3 {
            let (s, c) = (scale * p[i]).sin_cos();
            out[base + i] = s;
            out[base + 3 + i] = c;
        }
        scale *= 2.0;
    }
}

#[inline]
/// Keeps NaN so non-finite parameters surface as a non-finite output.
fn relu(v: &mut f64) {
    if *v < 0.0 {
        *v = 0.0;
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn validate_inputs(positions: &[Vector3<f64>], directions: &[Vector3<f64>]) -> Result<()> {
    if positions.len() != directions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions vs {} directions",
            positions.len(),
            directions.len()
        )));
    }
    for (i, (p, d)) in positions.iter().zip(directions).enumerate() {
        if !p.iter().chain(d.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        let norm = d.norm();
        if (norm - 1.0).abs() > UNIT_DIRECTION_TOLERANCE {
            return Err(Error::NonUnitDirection { index: i, norm });
        }
    }
    Ok(())
}

/// Evaluates densities and colors for a batch of samples.
pub fn eval_field(
    params: &RadianceFieldParams,
    positions: &[Vector3<f64>],
    directions: &[Vector3<f64>],
) -> Result<FieldOutput> {
    validate_inputs(positions, directions)?;
    let parts: Vec<FieldOutput> = positions
        .par_chunks(CHUNK)
        .zip(directions.par_chunks(CHUNK))
        .map(|(p, d)| params.forward_taped(p, d).0)
        .collect();
    let mut out = FieldOutput::with_capacity(positions.len());
    parts.into_iter().for_each(|p| out.extend(p));
    Ok(out)
}

/// Vector-Jacobian product of [`eval_field`] with respect to the parameters.
pub fn field_vjp(
    params: &RadianceFieldParams,
    positions: &[Vector3<f64>],
    directions: &[Vector3<f64>],
    d_densities: &[f64],
    d_colors: &[Rgb],
) -> Result<Vec<f64>> {
    validate_inputs(positions, directions)?;
    if d_densities.len() != positions.len() || d_colors.len() != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "cotangents ({}, {}) for {} samples",
            d_densities.len(),
            d_colors.len(),
            positions.len()
        )));
    }
    let partials: Vec<Vec<f64>> = (0..positions.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let r = c * CHUNK..((c + 1) * CHUNK).min(positions.len());
            let (_, tape) = params.forward_taped(&positions[r.clone()], &directions[r.clone()]);
            let mut g = vec![0.0; params.len()];
            params.backward(&tape, &d_densities[r.clone()], &d_colors[r], &mut g);
            g
        })
        .collect();
    Ok(sum_in_order(partials, params.len()))
}

/// Sums per-chunk gradients in chunk order so results do not depend on
/// thread scheduling.
pub(crate) fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for g in partials {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldConfig {
        FieldConfig {
            pe_position_freqs: 2,
            pe_direction_freqs: 1,
            hidden_layers: 1,
            hidden_width: 8,
            init_seed: 3,
        }
    }

    fn inputs(n: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let dirs = (0..n)
            .map(|_| Vector3::<f64>::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize())
            .collect();
        (pos, dirs)
    }

    #[test]
    fn zero_params_give_symmetric_output() {
        let params = RadianceFieldParams::zeros(FieldConfig::default()).unwrap();
        let (pos, dirs) = inputs(5, 1);
        let out = eval_field(&params, &pos, &dirs).unwrap();
        for (s, c) in out.densities.iter().zip(&out.colors) {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
            assert_eq!(*c, [0.5; 3]);
        }
    }

    #[test]
    fn rejects_non_unit_direction_and_non_finite_position() {
        let params = RadianceFieldParams::init(tiny()).unwrap();
        let pos = vec![Vector3::zeros()];
        let err = eval_field(&params, &pos, &[Vector3::new(1.2, 0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::NonUnitDirection { index: 0, .. }));
        let err = eval_field(
            &params,
            &[Vector3::new(f64::NAN, 0.0, 0.0)],
            &[Vector3::x()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput(0)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let params = RadianceFieldParams::init(tiny()).unwrap();
        let (pos, dirs) = inputs(7, 2);
        let g = field_vjp(&params, &pos, &dirs, &[0.0; 7], &[[0.0; 3]; 7]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let params = RadianceFieldParams::init(tiny()).unwrap();
        let (pos, dirs) = inputs(3, 2);
        let err = field_vjp(&params, &pos, &dirs, &[0.0; 2], &[[0.0; 3]; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn density_gradient_is_linear_over_points() {
        let params = RadianceFieldParams::init(tiny()).unwrap();
        let (pos, dirs) = inputs(2, 5);
        let both = field_vjp(&params, &pos, &dirs, &[1.0, 1.0], &[[0.0; 3]; 2]).unwrap();
        let a = field_vjp(&params, &pos[..1], &dirs[..1], &[1.0], &[[0.0; 3]]).unwrap();
        let b = field_vjp(&params, &pos[1..], &dirs[1..], &[1.0], &[[0.0; 3]]).unwrap();
        for i in 0..both.len() {
            assert!((both[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn density_ignores_view_direction() {
        let params = RadianceFieldParams::init(tiny()).unwrap();
        let p = vec![Vector3::new(0.1, -0.2, 0.3); 2];
        let d = vec![Vector3::x(), Vector3::new(0.0, 0.6, 0.8)];
        let out = eval_field(&params, &p, &d).unwrap();
        assert_eq!(out.densities[0], out.densities[1]);
        assert_ne!(out.colors[0], out.colors[1]);
    }

    #[test]
    fn layout_matches_parameter_count() {
        let cfg = tiny();
        let layout = FieldLayout::for_config(&cfg);
        let mut expected = 0;
        for l in layout.layers() {
            assert_eq!(l.weight_offset, expected);
            expected += l.inputs * l.outputs + l.outputs;
        }
        assert_eq!(layout.param_count(), expected);
        assert_eq!(layout.trunk[0].inputs, 15);
        assert_eq!(layout.color_hidden.inputs, 8 + 9);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}

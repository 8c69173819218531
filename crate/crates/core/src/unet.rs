//! Modified 3D U-Net and its attention-gated variant.
//!
//! Encoder scale `i` (1-based) holds two `conv -> instance norm -> LeakyReLU`
//! blocks; the first block of scales 2..=depth and of the bottleneck uses
//! stride 2, so the network drops resolution exactly `depth` times. Each
//! decoder stage runs a block at the coarse scale, upsamples by nearest
//! neighbour, concatenates the (optionally gated) skip features, matches
//! channels with a 1x1x1 conv and runs a second block. The head is a 1x1x1
//! conv followed by the normalized ReLU.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2, rng_from_seed, RngState};
use crate::tensor::{
    analytic_gradients, branch_pattern, central_difference, relative_error,
    smooth_central_difference, GradCheckReport, Scalar, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Baseline and follow-up images stacked as channels.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of down/upsampling operations.
    pub depth: usize,
    pub base_filters: usize,
    pub attention: bool,
    pub dropout_p: f64,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 2,
            out_channels: 1,
            depth: 4,
            base_filters: 8,
            attention: false,
            dropout_p: 0.2,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be >= 1".into());
        }
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_filters == 0 {
            return bad("base_filters must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!(
                "leaky_slope must be in (0, 1), got {}",
                self.leaky_slope
            ));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be > 0".into());
        }
        Ok(())
    }

    /// Feature channels at encoder scale `scale` (1-based); `depth + 1` is the bottleneck.
    pub fn channels(&self, scale: usize) -> usize {
        self.base_filters << (scale - 1)
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Weight and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Additive attention gate on a skip connection:
/// `alpha = sigmoid(psi(relu(Wx x + up(Wg g))))`, output `x * alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate<T: Scalar = f32> {
    pub wx: ConvParams<T>,
    pub wg: ConvParams<T>,
    pub psi: ConvParams<T>,
}

impl<T: Scalar> AttentionGate<T> {
    pub fn inter_channels(&self) -> usize {
        self.wx.weight.shape()[0]
    }

    pub fn random(x_channels: usize, g_channels: usize, rng: &mut RngState) -> Self {
        let inter = x_channels.div_ceil(2);
        let mut conv = |cout, cin| ConvParams {
            weight: kaiming(&[cout, cin, 1, 1, 1], rng),
            bias: Tensor::zeros(&[cout]),
        };
        AttentionGate {
            wx: conv(inter, x_channels),
            wg: conv(inter, g_channels),
            psi: conv(1, inter),
        }
    }

    /// Gated skip features and the attention coefficients.
    pub fn apply(&self, x: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let gv = tape.leaf(g.clone(), false);
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), false);
        let vars = GateVars {
            wx: (leaf(&self.wx.weight), leaf(&self.wx.bias)),
            wg: (leaf(&self.wg.weight), leaf(&self.wg.bias)),
            psi: (leaf(&self.psi.weight), leaf(&self.psi.bias)),
        };
        let (out, alpha) = gate_on_tape(&mut tape, xv, gv, &vars)?;
        Ok((tape.value(out).clone(), tape.value(alpha).clone()))
    }
}

/// Gates skip features `x` with the coarser decoder feature `g`.
pub fn attention_gate<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    gate: &AttentionGate<T>,
) -> Result<Tensor<T>> {
    gate.apply(x, g).map(|(out, _)| out)
}

struct GateVars {
    wx: (Var, Var),
    wg: (Var, Var),
    psi: (Var, Var),
}

fn gate_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, g: Var, p: &GateVars) -> Result<(Var, Var)> {
    let xs = tape.value(x).dims5()?;
    let gs = tape.value(g).dims5()?;
    if gs[0] != xs[0] || (2..5).any(|a| 2 * gs[a] != xs[a]) {
        return Err(Error::shape(format!(
            "attention gate: gating signal {gs:?} upsampled by 2 does not match skip features {xs:?}"
        )));
    }
    let theta = tape.conv3d(x, p.wx.0, p.wx.1, 1, 0)?;
    let phi = tape.conv3d(g, p.wg.0, p.wg.1, 1, 0)?;
    let phi = tape.upsample2x(phi)?;
    let sum = tape.add(theta, phi)?;
    let act = tape.relu(sum);
    let psi = tape.conv3d(act, p.psi.0, p.psi.1, 1, 0)?;
    let alpha = tape.sigmoid(psi);
    Ok((tape.scale_by_map(x, alpha)?, alpha))
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

/// Parameters of a built network, keyed by a deterministic name scheme
/// (`enc{scale}.{a|b}.conv.weight`, `dec{scale}.match.bias`, `gate{scale}.psi.weight`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: IndexMap<String, Tensor<T>>,
}

/// Parameter handles of a model bound onto one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming,
    Zeros,
    Ones,
}

fn push_conv(specs: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, k, k, k],
        init: Init::Kaiming,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

/// 3x3x3 conv plus instance-norm affine parameters.
fn push_block(specs: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize) {
    push_conv(specs, &format!("{prefix}.conv"), cout, cin, 3);
    specs.push(ParamSpec {
        name: format!("{prefix}.norm.gamma"),
        shape: vec![cout],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.norm.beta"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let depth = cfg.depth;
    let mut cin = cfg.in_channels;
    for scale in 1..=depth {
        let c = cfg.channels(scale);
        push_block(&mut specs, &format!("enc{scale}.a"), c, cin);
        push_block(&mut specs, &format!("enc{scale}.b"), c, c);
        cin = c;
    }
    let cb = cfg.channels(depth + 1);
    push_block(&mut specs, "bottleneck.a", cb, cin);
    push_block(&mut specs, "bottleneck.b", cb, cb);
    for scale in (1..=depth).rev() {
        let c = cfg.channels(scale);
        let cg = cfg.channels(scale + 1);
        if cfg.attention {
            let inter = c.div_ceil(2);
            push_conv(&mut specs, &format!("gate{scale}.wx"), inter, c, 1);
            push_conv(&mut specs, &format!("gate{scale}.wg"), inter, cg, 1);
            push_conv(&mut specs, &format!("gate{scale}.psi"), 1, inter, 1);
        }
        push_block(&mut specs, &format!("dec{scale}.pre"), c, cg);
        push_conv(&mut specs, &format!("dec{scale}.match"), c, 2 * c, 1);
        push_block(&mut specs, &format!("dec{scale}.post"), c, c);
    }
    push_conv(&mut specs, "head", cfg.out_channels, cfg.channels(1), 1);
    specs
}

/// Expected parameter names and shapes for `config`.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect()
}

/// Output of [`mc_dropout_forward`].
#[derive(Clone, Debug)]
pub struct McOutput<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub samples: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let params = layout(&config)
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Kaiming => kaiming(&spec.shape, &mut rng),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, T::one()),
                };
                (spec.name, t)
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        mut stored: IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in parameter_shapes(&config) {
            let t = stored
                .shift_remove(&name)
                .ok_or_else(|| crate::FormatError::MissingEntry(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(crate::FormatError::EntryShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                }
                .into());
            }
            params.insert(name, t);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::invalid(format!("unexpected parameter {extra:?}")));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn attention_gate_count(&self) -> usize {
        self.params
            .keys()
            .filter(|k| k.starts_with("gate") && k.ends_with(".psi.weight"))
            .count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// The attention gate guarding skip connection `scale`, if any.
    pub fn attention_gate(&self, scale: usize) -> Option<AttentionGate<T>> {
        let conv = |role: &str| {
            Some(ConvParams {
                weight: self.param(&format!("gate{scale}.{role}.weight"))?.clone(),
                bias: self.param(&format!("gate{scale}.{role}.bias"))?.clone(),
            })
        };
        Some(AttentionGate {
            wx: conv("wx")?,
            wg: conv("wg")?,
            psi: conv("psi")?,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .values()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, d, h, w] = shape else {
            return Err(Error::shape(format!(
                "network input must be (B, C, D, H, W), got {shape:?}"
            )));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let k = self.config.divisor();
        if [d, h, w].iter().any(|&s| s % k != 0) {
            return Err(Error::shape(format!(
                "spatial size ({d}, {h}, {w}) must be divisible by {k} (2^depth)"
            )));
        }
        Ok(())
    }

    /// Runs the network on a tape. Dropout is active iff `dropout_active`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        input: Var,
        dropout_active: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let cfg = &self.config;
        let p = |name: &str| -> Var {
            let idx = self
                .params
                .get_index_of(name)
                .unwrap_or_else(|| panic!("no parameter {name}"));
            bound.vars[idx]
        };
        let slope = T::from_f64(cfg.leaky_slope);
        let eps = T::from_f64(cfg.norm_eps);
        let block = |tape: &mut Tape<T>, prefix: &str, x: Var, stride: usize| -> Result<Var> {
            let y = tape.conv3d(
                x,
                p(&format!("{prefix}.conv.weight")),
                p(&format!("{prefix}.conv.bias")),
                stride,
                1,
            )?;
            let y = tape.instance_norm3d(
                y,
                p(&format!("{prefix}.norm.gamma")),
                p(&format!("{prefix}.norm.beta")),
                eps,
            )?;
            Ok(tape.leaky_relu(y, slope))
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = input;
        for scale in 1..=cfg.depth {
            let stride = if scale == 1 { 1 } else { 2 };
            x = block(tape, &format!("enc{scale}.a"), x, stride)?;
            x = block(tape, &format!("enc{scale}.b"), x, 1)?;
            x = tape.dropout3d(x, cfg.dropout_p, rng, dropout_active)?;
            skips.push(x);
        }
        x = block(tape, "bottleneck.a", x, 2)?;
        x = block(tape, "bottleneck.b", x, 1)?;
        x = tape.dropout3d(x, cfg.dropout_p, rng, dropout_active)?;

        for scale in (1..=cfg.depth).rev() {
            let mut skip = skips[scale - 1];
            if cfg.attention {
                let role = |r: &str| {
                    (
                        p(&format!("gate{scale}.{r}.weight")),
                        p(&format!("gate{scale}.{r}.bias")),
                    )
                };
                let vars = GateVars {
                    wx: role("wx"),
                    wg: role("wg"),
                    psi: role("psi"),
                };
                skip = gate_on_tape(tape, skip, x, &vars)?.0;
            }
            let pre = block(tape, &format!("dec{scale}.pre"), x, 1)?;
            let up = tape.upsample2x(pre)?;
            let cat = tape.concat_channels(up, skip)?;
            let matched = tape.conv3d(
                cat,
                p(&format!("dec{scale}.match.weight")),
                p(&format!("dec{scale}.match.bias")),
                1,
                0,
            )?;
            x = block(tape, &format!("dec{scale}.post"), matched, 1)?;
            x = tape.dropout3d(x, cfg.dropout_p, rng, dropout_active)?;
        }
        let logits = tape.conv3d(x, p("head.weight"), p("head.bias"), 1, 0)?;
        Ok(tape.normalized_relu(logits))
    }

    pub fn forward(
        &self,
        input: &Tensor<T>,
        train_mode: bool,
        rng: &mut RngState,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(input.clone(), false);
        let y = self.forward_on_tape(&mut tape, &bound, x, train_mode, rng)?;
        Ok(tape.value(y).clone())
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(input, false, &mut rng_from_seed(0))
    }
}

/// Runs `passes` forward passes with dropout active and averages them.
///
/// Pass `t` draws its dropout masks from a stream derived from `(seed, t)`;
/// the mean is accumulated in pass order.
pub fn mc_dropout_forward<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    passes: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<McOutput<T>> {
    if passes < 1 {
        return Err(Error::invalid(
            "Monte-Carlo dropout needs at least one pass",
        ));
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    let mut samples = keep_samples.then(Vec::new);
    for t in 0..passes {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let y = model.forward(input, true, &mut rng)?;
        if acc.is_empty() {
            acc = vec![0.0; y.len()];
            shape = y.shape().to_vec();
        }
        acc.iter_mut()
            .zip(y.data())
            .for_each(|(a, &v)| *a += v.as_f64());
        if let Some(s) = samples.as_mut() {
            s.push(y);
        }
    }
    let n = passes as f64;
    let mean = Tensor::new(shape, acc.into_iter().map(|a| T::from_f64(a / n)).collect())?;
    Ok(McOutput { mean, samples })
}

pub const ZERO_GRADIENT_RATIO: f64 = 1e-9;

/// Outcome of [`network_gradient_check`].
#[derive(Clone, Debug)]
pub struct NetworkGradCheck {
    /// Relative errors over probes whose tape gradient is non-zero.
    pub report: GradCheckReport,
    /// Name of the parameter tensor holding the worst probe.
    pub worst_param: Option<String>,
    /// Parameters whose tape gradient is zero up to round-off (at most
    /// [`ZERO_GRADIENT_RATIO`] times `grad_scale`): conv biases feeding
    /// instance norm, anything behind a single-voxel bottleneck.
    pub zero_params: usize,
    pub zero_probed: usize,
    /// Largest |central difference| among the zero-gradient probes; should
    /// sit at the level of evaluation round-off.
    pub zero_max_numeric: f64,
    pub zero_max_analytic: f64,
    /// Largest |tape gradient| over all parameters.
    pub grad_scale: f64,
    /// Drawn probes skipped because a ReLU kink or a tied maximum lay within
    /// `h` of the point; each was replaced by another draw.
    pub kink_skipped: usize,
}

/// Compares tape gradients against central differences for `probes`
/// randomly chosen parameters of a 64-bit network, plus up to `probes / 4`
/// parameters whose tape gradient is exactly zero.
///
/// A probe whose stencil changes the branch pattern of any piecewise-smooth
/// primitive straddles a non-differentiable point, where no finite
/// difference converges to the one-sided tape derivative; it is skipped and
/// another parameter is drawn in its place.
///
/// The objective is the soft-Dice loss plus a random projection `sum(r * y)`
/// of the output; the projection keeps per-parameter gradients well above
/// evaluation round-off. Dropout stays active with a fixed mask seed, so
/// every evaluation sees the same mask.
pub fn network_gradient_check(
    config: &ModelConfig,
    spatial: usize,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<NetworkGradCheck> {
    let mut model = Model::<f64>::build(config.clone())?;
    // with beta at its zero init a single-voxel instance norm (the S=16
    // bottleneck) outputs exactly 0 and sits on the LeakyReLU kink, so the
    // check runs at a generic point instead
    let mut jitter = rng_from_seed(derive_seed(seed, 3));
    for (name, t) in model.params_mut() {
        if name.ends_with(".norm.gamma") || name.ends_with(".norm.beta") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += jitter.random_range(-0.3..0.3));
        }
    }
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    // an all-zero output (every pre-activation <= 0, or a stage whose
    // channels were all dropped) makes every gradient vanish and the check
    // pass vacuously, so redraw the input and mask until the output is live
    let mut drawn = None;
    for attempt in 0..32 {
        let x = Tensor::from_fn(&[1, config.in_channels, spatial, spatial, spatial], |_| {
            rng.random_range(-1.0..1.0)
        });
        let mask_seed = derive_seed2(seed, 2, attempt);
        if model
            .forward(&x, true, &mut rng_from_seed(mask_seed))?
            .max()
            > 0.0
        {
            drawn = Some((x, mask_seed));
            break;
        }
    }
    let (input, mask_seed) =
        drawn.ok_or_else(|| Error::invalid("no input gave a non-zero network output"))?;
    let out_shape = [1, config.out_channels, spatial, spatial, spatial];
    let target = Tensor::from_fn(&out_shape, |_| rng.random_range(0.0..1.0));
    let projection = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let objective = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = BoundParams {
            vars: vars.to_vec(),
        };
        let x = tape.leaf(input.clone(), false);
        let g = tape.leaf(target.clone(), false);
        let r = tape.leaf(projection.clone(), false);
        let y = model.forward_on_tape(tape, &bound, x, true, &mut rng_from_seed(mask_seed))?;
        let dice = tape.soft_dice_loss(y, g, 1e-8, false)?;
        let ry = tape.mul(y, r)?;
        let proj = tape.sum(ry);
        tape.add(dice, proj)
    };

    let leaves: Vec<Tensor<f64>> = model.params().values().cloned().collect();
    let analytic = analytic_gradients(&objective, &leaves)?;
    let grad_scale = analytic
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    // gradients that are zero in exact arithmetic come back as round-off
    // residue, which no relative error can judge
    let negligible = ZERO_GRADIENT_RATIO * grad_scale;
    let (mut live, mut zero) = (Vec::new(), Vec::new());
    for (l, g) in analytic.iter().enumerate() {
        for (i, &v) in g.data().iter().enumerate() {
            if v.abs() > negligible {
                live.push((l, i))
            } else {
                zero.push((l, i))
            }
        }
    }
    live.shuffle(&mut rng);
    zero.shuffle(&mut rng);
    let base = branch_pattern(&objective, &leaves)?;
    let mut work = leaves.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        nonzero: 0,
        worst: None,
    };
    let mut kink_skipped = 0;
    for &(l, i) in &live {
        if report.checked == probes {
            break;
        }
        let Some(numeric) = smooth_central_difference(&objective, &mut work, l, i, h, &base)?
        else {
            kink_skipped += 1;
            continue;
        };
        let a = analytic[l].data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((l, i));
        }
        report.checked += 1;
        report.nonzero += 1;
    }
    let zero_chosen = &zero[..zero.len().min(probes / 4)];
    let (mut zero_max_numeric, mut zero_max_analytic) = (0.0f64, 0.0f64);
    for &(l, i) in zero_chosen {
        zero_max_numeric =
            zero_max_numeric.max(central_difference(&objective, &mut work, l, i, h)?.abs());
        zero_max_analytic = zero_max_analytic.max(analytic[l].data()[i].abs());
    }
    let names: Vec<&String> = model.params().keys().collect();
    Ok(NetworkGradCheck {
        worst_param: report.worst.map(|(l, i)| format!("{}[{i}]", names[l])),
        report,
        zero_params: zero.len(),
        zero_probed: zero_chosen.len(),
        zero_max_numeric,
        zero_max_analytic,
        grad_scale,
        kink_skipped,
    })
}

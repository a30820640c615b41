//! The three scoring architectures as explicit forward/backward procedures
//! over a single flat parameter vector.
//!
//! All models map one instance to a scalar score through a final linear
//! neuron. Gradients are hand-derived per architecture; there is no autodiff
//! graph. The flat layout is always weights-then-bias, layers in forward
//! order, which keeps the optimizer architecture-agnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{affine_into, conv2d_valid_into, maxpool2d_into, Tensor};

/// Architecture selector.
///
/// `SingleLinear` is one neuron with linear activation. `OneHiddenTanh` adds
/// a tanh hidden layer whose width equals the input dimension. `MnistCnn` is
/// the fixed two-conv-layer network for 1x28x28 images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    SingleLinear { input_dim: usize },
    OneHiddenTanh { input_dim: usize },
    MnistCnn,
}

// MnistCnn geometry: 1x28x28 -> conv 5x5/20 -> relu -> pool2 -> conv 5x5/50
// -> relu -> pool2 -> fc 500 -> relu -> fc 1.
const IMG: usize = 28;
const K: usize = 5;
const CONV1_OUT: usize = 20;
const CONV2_OUT: usize = 50;
const FC1_OUT: usize = 500;
const CONV1_MAP: usize = IMG - K + 1; // 24
const POOL1_MAP: usize = CONV1_MAP / 2; // 12
const CONV2_MAP: usize = POOL1_MAP - K + 1; // 8
const POOL2_MAP: usize = CONV2_MAP / 2; // 4
const FLAT: usize = CONV2_OUT * POOL2_MAP * POOL2_MAP; // 800

impl ModelSpec {
    /// Shape an instance must have to be scored by this model.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::SingleLinear { input_dim } | ModelSpec::OneHiddenTanh { input_dim } => {
                vec![*input_dim]
            }
            ModelSpec::MnistCnn => vec![1, IMG, IMG],
        }
    }

    pub fn is_image_input(&self) -> bool {
        matches!(self, ModelSpec::MnistCnn)
    }

    /// Exact length of the flat parameter vector.
    pub fn num_params(&self) -> usize {
        match self {
            ModelSpec::SingleLinear { input_dim } => input_dim + 1,
            ModelSpec::OneHiddenTanh { input_dim } => {
                input_dim * input_dim + input_dim + input_dim + 1
            }
            ModelSpec::MnistCnn => {
                (CONV1_OUT * K * K + CONV1_OUT)
                    + (CONV2_OUT * CONV1_OUT * K * K + CONV2_OUT)
                    + (FC1_OUT * FLAT + FC1_OUT)
                    + (FC1_OUT + 1)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::SingleLinear { input_dim } | ModelSpec::OneHiddenTanh { input_dim } => {
                if *input_dim == 0 {
                    return Err(Error::Input("model input dimension must be positive".into()));
                }
            }
            ModelSpec::MnistCnn => {}
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.input_shape();
        if x.shape() != want.as_slice() {
            return Err(Error::Dimension {
                op: "forward_instance",
                message: format!("{self:?} expects input {want:?}, got {:?}", x.shape()),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector theta. Layout is fixed per [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Parameters {
    theta: Vec<f64>,
}

impl Parameters {
    pub fn new(spec: &ModelSpec, theta: Vec<f64>) -> Result<Parameters> {
        if theta.len() != spec.num_params() {
            return Err(Error::Input(format!(
                "{spec:?} needs {} parameters, got {}",
                spec.num_params(),
                theta.len()
            )));
        }
        Ok(Parameters { theta })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out)) per layer),
/// zero biases. Deterministic for a given seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; spec.num_params()];
    let fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize,
                theta: &mut [f64],
                rng: &mut ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut theta[range] {
            *w = rng.random_range(-bound..bound);
        }
    };
    match spec {
        ModelSpec::SingleLinear { input_dim } => {
            fill(0..*input_dim, *input_dim, 1, &mut theta, &mut rng);
        }
        ModelSpec::OneHiddenTanh { input_dim } => {
            let d = *input_dim;
            fill(0..d * d, d, d, &mut theta, &mut rng);
            let w2_start = d * d + d;
            fill(w2_start..w2_start + d, d, 1, &mut theta, &mut rng);
        }
        ModelSpec::MnistCnn => {
            let seg = CnnSegments::new();
            // Convolution fans use the receptive field: fan_in = C*k*k,
            // fan_out = K*k*k.
            fill(seg.conv1_w.clone(), K * K, CONV1_OUT * K * K, &mut theta, &mut rng);
            fill(
                seg.conv2_w.clone(),
                CONV1_OUT * K * K,
                CONV2_OUT * K * K,
                &mut theta,
                &mut rng,
            );
            fill(seg.fc1_w.clone(), FLAT, FC1_OUT, &mut theta, &mut rng);
            fill(seg.fc2_w.clone(), FC1_OUT, 1, &mut theta, &mut rng);
        }
    }
    Parameters { theta }
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    spec: ModelSpec,
    theta: Parameters,
}

/// Serializes a (spec, theta) pair as `{"spec": ..., "theta": [...]}`.
/// Floats survive a round trip bit-exactly.
pub fn params_to_json(spec: &ModelSpec, params: &Parameters) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParamsDoc {
        spec: *spec,
        theta: params.clone(),
    })?)
}

pub fn params_from_json(text: &str) -> Result<(ModelSpec, Parameters)> {
    let doc: ParamsDoc = serde_json::from_str(text)?;
    let params = Parameters::new(&doc.spec, doc.theta.theta)?;
    Ok((doc.spec, params))
}

/// Element ranges of each layer inside the flat CNN parameter vector.
struct CnnSegments {
    conv1_w: std::ops::Range<usize>,
    conv1_b: std::ops::Range<usize>,
    conv2_w: std::ops::Range<usize>,
    conv2_b: std::ops::Range<usize>,
    fc1_w: std::ops::Range<usize>,
    fc1_b: std::ops::Range<usize>,
    fc2_w: std::ops::Range<usize>,
    fc2_b: std::ops::Range<usize>,
}

impl CnnSegments {
    fn new() -> CnnSegments {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        CnnSegments {
            conv1_w: take(CONV1_OUT * K * K),
            conv1_b: take(CONV1_OUT),
            conv2_w: take(CONV2_OUT * CONV1_OUT * K * K),
            conv2_b: take(CONV2_OUT),
            fc1_w: take(FC1_OUT * FLAT),
            fc1_b: take(FC1_OUT),
            fc2_w: take(FC1_OUT),
            fc2_b: take(1),
        }
    }
}

/// Intermediate state captured by a forward pass, sufficient to run the
/// matching backward pass. A cache is only valid for the exact
/// (spec, theta, input) triple that produced it.
#[derive(Debug, Clone)]
pub enum ForwardCache {
    SingleLinear {
        input: Tensor,
    },
    OneHiddenTanh {
        input: Tensor,
        hidden_pre: Vec<f64>,
    },
    MnistCnn {
        input: Tensor,
        conv1_pre: Vec<f64>,
        pool1_out: Vec<f64>,
        pool1_argmax: Vec<usize>,
        conv2_pre: Vec<f64>,
        pool2_out: Vec<f64>,
        pool2_argmax: Vec<usize>,
        fc1_pre: Vec<f64>,
    },
}

/// Scores one instance: returns f(x; theta) and the cache for backward.
pub fn forward_instance(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
) -> Result<(f64, ForwardCache)> {
    spec.validate()?;
    spec.check_input(x)?;
    if params.len() != spec.num_params() {
        return Err(Error::Usage(format!(
            "parameter vector of length {} does not match {spec:?} ({} expected)",
            params.len(),
            spec.num_params()
        )));
    }
    let theta = params.theta();
    match spec {
        ModelSpec::SingleLinear { input_dim } => {
            let d = *input_dim;
            let w = &theta[..d];
            let b = theta[d];
            let score = b + w.iter().zip(x.data()).map(|(wi, xi)| wi * xi).sum::<f64>();
            Ok((score, ForwardCache::SingleLinear { input: x.clone() }))
        }
        ModelSpec::OneHiddenTanh { input_dim } => {
            let d = *input_dim;
            let w1 = &theta[..d * d];
            let b1 = &theta[d * d..d * d + d];
            let w2 = &theta[d * d + d..d * d + 2 * d];
            let b2 = theta[d * d + 2 * d];
            let mut hidden_pre = vec![0.0; d];
            affine_into(w1, b1, x.data(), &mut hidden_pre);
            let score = b2
                + w2.iter()
                    .zip(&hidden_pre)
                    .map(|(wi, hi)| wi * hi.tanh())
                    .sum::<f64>();
            Ok((
                score,
                ForwardCache::OneHiddenTanh {
                    input: x.clone(),
                    hidden_pre,
                },
            ))
        }
        ModelSpec::MnistCnn => {
            let seg = CnnSegments::new();
            let mut conv1_pre = vec![0.0; CONV1_OUT * CONV1_MAP * CONV1_MAP];
            conv2d_valid_into(
                x.data(),
                (1, IMG, IMG),
                &theta[seg.conv1_w.clone()],
                (CONV1_OUT, K, K),
                &theta[seg.conv1_b.clone()],
                &mut conv1_pre,
            );
            let conv1_act: Vec<f64> = conv1_pre.iter().map(|&v| v.max(0.0)).collect();
            let mut pool1_out = vec![0.0; CONV1_OUT * POOL1_MAP * POOL1_MAP];
            let mut pool1_argmax = vec![0usize; pool1_out.len()];
            maxpool2d_into(
                &conv1_act,
                (CONV1_OUT, CONV1_MAP, CONV1_MAP),
                &mut pool1_out,
                &mut pool1_argmax,
            );

            let mut conv2_pre = vec![0.0; CONV2_OUT * CONV2_MAP * CONV2_MAP];
            conv2d_valid_into(
                &pool1_out,
                (CONV1_OUT, POOL1_MAP, POOL1_MAP),
                &theta[seg.conv2_w.clone()],
                (CONV2_OUT, K, K),
                &theta[seg.conv2_b.clone()],
                &mut conv2_pre,
            );
            let conv2_act: Vec<f64> = conv2_pre.iter().map(|&v| v.max(0.0)).collect();
            let mut pool2_out = vec![0.0; FLAT];
            let mut pool2_argmax = vec![0usize; FLAT];
            maxpool2d_into(
                &conv2_act,
                (CONV2_OUT, CONV2_MAP, CONV2_MAP),
                &mut pool2_out,
                &mut pool2_argmax,
            );

            let mut fc1_pre = vec![0.0; FC1_OUT];
            affine_into(
                &theta[seg.fc1_w.clone()],
                &theta[seg.fc1_b.clone()],
                &pool2_out,
                &mut fc1_pre,
            );
            let w2 = &theta[seg.fc2_w.clone()];
            let b2 = theta[seg.fc2_b.start];
            let score = b2
                + w2.iter()
                    .zip(&fc1_pre)
                    .map(|(wi, hi)| wi * hi.max(0.0))
                    .sum::<f64>();

            Ok((
                score,
                ForwardCache::MnistCnn {
                    input: x.clone(),
                    conv1_pre,
                    pool1_out,
                    pool1_argmax,
                    conv2_pre,
                    pool2_out,
                    pool2_argmax,
                    fc1_pre,
                },
            ))
        }
    }
}

/// d(score)/d(theta) scaled by `dscore`, in the same flat layout as theta.
///
/// The cache must come from [`forward_instance`] with the same spec and
/// parameters; max-pool gradients are routed through the recorded argmax
/// indices and the relu gradient at exactly 0 is 0.
pub fn backward_instance(
    spec: &ModelSpec,
    params: &Parameters,
    cache: &ForwardCache,
    dscore: f64,
) -> Result<Vec<f64>> {
    let theta = params.theta();
    if params.len() != spec.num_params() {
        return Err(Error::Usage(format!(
            "parameter vector of length {} does not match {spec:?}",
            params.len()
        )));
    }
    let mut grad = vec![0.0; theta.len()];
    match (spec, cache) {
        (ModelSpec::SingleLinear { input_dim }, ForwardCache::SingleLinear { input }) => {
            let d = *input_dim;
            if input.len() != d {
                return Err(Error::Usage("forward cache does not match spec".into()));
            }
            for (g, xi) in grad[..d].iter_mut().zip(input.data()) {
                *g = dscore * xi;
            }
            grad[d] = dscore;
        }
        (
            ModelSpec::OneHiddenTanh { input_dim },
            ForwardCache::OneHiddenTanh { input, hidden_pre },
        ) => {
            let d = *input_dim;
            if input.len() != d || hidden_pre.len() != d {
                return Err(Error::Usage("forward cache does not match spec".into()));
            }
            let w2 = &theta[d * d + d..d * d + 2 * d];
            let (gw1, rest) = grad.split_at_mut(d * d);
            let (gb1, rest) = rest.split_at_mut(d);
            let (gw2, gb2) = rest.split_at_mut(d);
            for i in 0..d {
                let h = hidden_pre[i].tanh();
                gw2[i] = dscore * h;
                let dpre = dscore * w2[i] * (1.0 - h * h);
                gb1[i] = dpre;
                for (g, xj) in gw1[i * d..(i + 1) * d].iter_mut().zip(input.data()) {
                    *g = dpre * xj;
                }
            }
            gb2[0] = dscore;
        }
        (
            ModelSpec::MnistCnn,
            ForwardCache::MnistCnn {
                input,
                conv1_pre,
                pool1_out,
                pool1_argmax,
                conv2_pre,
                pool2_out,
                pool2_argmax,
                fc1_pre,
            },
        ) => {
            let seg = CnnSegments::new();

            // Output neuron.
            let w2 = &theta[seg.fc2_w.clone()];
            let mut dfc1_act = vec![0.0; FC1_OUT];
            for i in 0..FC1_OUT {
                grad[seg.fc2_w.start + i] = dscore * fc1_pre[i].max(0.0);
                dfc1_act[i] = dscore * w2[i];
            }
            grad[seg.fc2_b.start] = dscore;

            // Fully connected relu layer.
            let mut dflat = vec![0.0; FLAT];
            {
                let fc1_w = &theta[seg.fc1_w.clone()];
                let gfc1_w = &mut grad[seg.fc1_w.clone()];
                for i in 0..FC1_OUT {
                    let dpre = if fc1_pre[i] > 0.0 { dfc1_act[i] } else { 0.0 };
                    if dpre == 0.0 {
                        continue;
                    }
                    let row = &fc1_w[i * FLAT..(i + 1) * FLAT];
                    let grow = &mut gfc1_w[i * FLAT..(i + 1) * FLAT];
                    for j in 0..FLAT {
                        grow[j] = dpre * pool2_out[j];
                        dflat[j] += dpre * row[j];
                    }
                }
                // fc1 bias shares dpre with the weight rows.
                for i in 0..FC1_OUT {
                    grad[seg.fc1_b.start + i] =
                        if fc1_pre[i] > 0.0 { dfc1_act[i] } else { 0.0 };
                }
            }

            // Unpool into conv2 activations, gate by relu.
            let mut dconv2_pre = vec![0.0; CONV2_OUT * CONV2_MAP * CONV2_MAP];
            for (cell, &src) in pool2_argmax.iter().enumerate() {
                if conv2_pre[src] > 0.0 {
                    dconv2_pre[src] += dflat[cell];
                }
            }

            // conv2: gradients for kernels, bias, and its input (pool1).
            let mut dpool1 = vec![0.0; CONV1_OUT * POOL1_MAP * POOL1_MAP];
            conv_backward(
                pool1_out,
                (CONV1_OUT, POOL1_MAP, POOL1_MAP),
                &theta[seg.conv2_w.clone()],
                (CONV2_OUT, K, K),
                &dconv2_pre,
                &mut grad[seg.conv2_w.clone()],
                Some(&mut dpool1),
            );
            for k in 0..CONV2_OUT {
                grad[seg.conv2_b.start + k] = dconv2_pre
                    [k * CONV2_MAP * CONV2_MAP..(k + 1) * CONV2_MAP * CONV2_MAP]
                    .iter()
                    .sum();
            }

            // Unpool into conv1 activations, gate by relu.
            let mut dconv1_pre = vec![0.0; CONV1_OUT * CONV1_MAP * CONV1_MAP];
            for (cell, &src) in pool1_argmax.iter().enumerate() {
                if conv1_pre[src] > 0.0 {
                    dconv1_pre[src] += dpool1[cell];
                }
            }

            // conv1: input gradient is not needed.
            conv_backward(
                input.data(),
                (1, IMG, IMG),
                &theta[seg.conv1_w.clone()],
                (CONV1_OUT, K, K),
                &dconv1_pre,
                &mut grad[seg.conv1_w.clone()],
                None,
            );
            for k in 0..CONV1_OUT {
                grad[seg.conv1_b.start + k] = dconv1_pre
                    [k * CONV1_MAP * CONV1_MAP..(k + 1) * CONV1_MAP * CONV1_MAP]
                    .iter()
                    .sum();
            }
        }
        _ => {
            return Err(Error::Usage(
                "forward cache was produced by a different model spec".into(),
            ))
        }
    }
    Ok(grad)
}

/// Gradient of a valid cross-correlation w.r.t. its kernels and, optionally,
/// its input. `dout` has shape K x oh x ow.
fn conv_backward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    kernels: &[f64],
    (k, kh, kw): (usize, usize, usize),
    dout: &[f64],
    dkernels: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    debug_assert_eq!(dout.len(), k * oh * ow);
    for ko in 0..k {
        let dplane = &dout[ko * oh * ow..(ko + 1) * oh * ow];
        let kbase = ko * c * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    let in_base = ci * h * w;
                    let kc_base = kbase + ci * kh * kw;
                    for i in 0..kh {
                        let in_row = in_base + (oy + i) * w + ox;
                        let k_row = kc_base + i * kw;
                        for j in 0..kw {
                            dkernels[k_row + j] += g * input[in_row + j];
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            for j in 0..kw {
                                di[in_row + j] += g * kernels[k_row + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

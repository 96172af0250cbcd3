//! The invertible protection network.
//!
//! State is a pair of wavelet-domain feature maps `(X, Y)`, each
//! `B x 12 x h x w` (four Haar sub-bands per colour channel). Every secure
//! affine coupling block holds four dense convolutional subnets
//! `omega, phi, rho, eta : 16 -> 12` channels, each fed the current half
//! concatenated with the 4-channel secret map `K`:
//!
//! ```text
//! Y' = Y * exp(a(omega(X | K))) + phi(X | K)
//! X' = X * exp(a(rho(Y' | K))) + eta(Y' | K)
//! ```
//!
//! with `a(t) = alpha * (2 * sigmoid(t) - 1)`. The scale factors lie in
//! `(e^-alpha, e^alpha)`, so each block inverts exactly for any parameters:
//!
//! ```text
//! X = (X' - eta(Y' | K)) * exp(-a(rho(Y' | K)))
//! Y = (Y' - phi(X | K)) * exp(-a(omega(X | K)))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::keygen::KeygenConfig;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Wavelet channels of an RGB image.
pub const FEATURE_CHANNELS: usize = 12;
/// Wavelet channels of the secret map.
pub const KEY_CHANNELS: usize = 4;
/// Convolutions per subnet; the last is linear.
pub const DENSE_LAYERS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// How a model is trained to respond to a wrong key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WrongRecoveryMode {
    /// Wrong-key recoveries look like noise.
    Randomized,
    /// Wrong-key recoveries keep looking like the obfuscated template.
    Obfuscated,
}

impl WrongRecoveryMode {
    pub fn name(self) -> &'static str {
        match self {
            WrongRecoveryMode::Randomized => "randwr",
            WrongRecoveryMode::Obfuscated => "obfswr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "randwr" | "rand" => Ok(WrongRecoveryMode::Randomized),
            "obfswr" | "obfs" => Ok(WrongRecoveryMode::Obfuscated),
            other => Err(Error::InvalidConfig(format!(
                "unknown wrong-recovery mode {other:?}; expected randwr or obfswr"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Number of coupling blocks.
    pub blocks: usize,
    /// Channels added by each hidden dense layer.
    pub growth: usize,
    /// Bound of the centered-sigmoid scale activation.
    pub alpha: f64,
    /// Side of the square images the model works on.
    pub side: usize,
    pub mode: WrongRecoveryMode,
    pub keygen: KeygenConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            growth: 32,
            alpha: 2.0,
            side: 112,
            mode: WrongRecoveryMode::Randomized,
            keygen: KeygenConfig::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("at least one coupling block is required".into()));
        }
        if self.growth == 0 {
            return Err(Error::InvalidConfig("growth must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.side == 0 || self.side % 2 != 0 {
            return Err(Error::InvalidConfig(format!("image side must be even, got {}", self.side)));
        }
        if self.keygen.iterations == 0 {
            return Err(Error::InvalidConfig("key derivation needs at least one iteration".into()));
        }
        Ok(())
    }

    /// `(out, in)` channel counts of each subnet convolution.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let c0 = FEATURE_CHANNELS + KEY_CHANNELS;
        (0..DENSE_LAYERS)
            .map(|i| {
                let cin = c0 + i * self.growth;
                let cout = if i + 1 == DENSE_LAYERS { FEATURE_CHANNELS } else { self.growth };
                (cout, cin)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let per_subnet: usize = self
            .layer_channels()
            .iter()
            .map(|&(cout, cin)| cout * cin * 9 + cout)
            .sum();
        per_subnet * 4 * self.blocks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Densely connected subnet: layer `i` sees the input and the outputs of
/// all earlier layers, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetParams<T: Scalar = f32> {
    pub layers: Vec<ConvParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacbParams<T: Scalar = f32> {
    pub omega: SubnetParams<T>,
    pub phi: SubnetParams<T>,
    pub rho: SubnetParams<T>,
    pub eta: SubnetParams<T>,
}

impl<T: Scalar> SacbParams<T> {
    pub fn subnets(&self) -> [&SubnetParams<T>; 4] {
        [&self.omega, &self.phi, &self.rho, &self.eta]
    }

    fn subnets_mut(&mut self) -> [&mut SubnetParams<T>; 4] {
        [&mut self.omega, &mut self.phi, &mut self.rho, &mut self.eta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T: Scalar = f32> {
    pub config: FlowConfig,
    pub blocks: Vec<SacbParams<T>>,
}

impl<T: Scalar> FlowModel<T> {
    /// Hidden layers get He-normal weights from `seed`; every subnet's last
    /// layer starts at zero, so a fresh model is the identity map.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = config.layer_channels();
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let subnet = |rng: &mut ChaCha8Rng| SubnetParams {
            layers: channels
                .iter()
                .enumerate()
                .map(|(i, &(cout, cin))| {
                    let shape = [cout, cin, 3, 3];
                    let weight = if i + 1 == DENSE_LAYERS {
                        Tensor::zeros(&shape)
                    } else {
                        let normal = Normal::new(0.0, gain / ((cin * 9) as f64).sqrt()).expect("finite std");
                        Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(rng)))
                    };
                    ConvParams {
                        weight,
                        bias: Tensor::zeros(&[cout]),
                    }
                })
                .collect(),
        };
        let blocks = (0..config.blocks)
            .map(|_| SacbParams {
                omega: subnet(&mut rng),
                phi: subnet(&mut rng),
                rho: subnet(&mut rng),
                eta: subnet(&mut rng),
            })
            .collect();
        Ok(Self { config, blocks })
    }

    /// Like [`FlowModel::init`] but the output layers are also drawn, with
    /// standard deviation `final_std`, so the map is far from the identity.
    pub fn init_perturbed(config: FlowConfig, seed: u64, final_std: f64) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, final_std)
            .map_err(|e| Error::InvalidConfig(format!("final_std: {e}")))?;
        for block in &mut model.blocks {
            for net in block.subnets_mut() {
                let last = net.layers.last_mut().expect("subnets have layers");
                for v in last.weight.data_mut().iter_mut().chain(last.bias.data_mut()) {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            }
        }
        Ok(model)
    }

    /// Every parameter tensor in block, subnet (omega, phi, rho, eta),
    /// layer order with each weight followed by its bias.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.blocks
            .iter()
            .flat_map(|b| b.subnets())
            .flat_map(|s| s.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.subnets_mut())
            .flat_map(|s| s.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let net = |s: &SubnetParams<T>| SubnetParams {
            layers: s.layers.iter().map(conv).collect(),
        };
        FlowModel {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| SacbParams {
                    omega: net(&b.omega),
                    phi: net(&b.phi),
                    rho: net(&b.rho),
                    eta: net(&b.eta),
                })
                .collect(),
        }
    }

    /// Records the parameters on `tape`, trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundFlow {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut net = |s: &SubnetParams<T>| BoundSubnet {
            layers: s.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundSacb {
                omega: net(&b.omega),
                phi: net(&b.phi),
                rho: net(&b.rho),
                eta: net(&b.eta),
            })
            .collect();
        BoundFlow {
            blocks,
            alpha: self.config.alpha,
        }
    }

    /// Runs the forward flow outside of any training graph.
    pub fn forward(&self, x: &Tensor<T>, y: &Tensor<T>, key: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.run(x, y, key, flow_forward)
    }

    /// Runs the backward (inverse) flow outside of any training graph.
    pub fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, key: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.run(x, y, key, flow_backward)
    }

    fn run(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        key: &Tensor<T>,
        f: fn(&mut Tape<T>, &BoundFlow, Var, Var, Var) -> Result<(Var, Var)>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let batch = x.dims4()?.0;
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let kv = tape.constant(broadcast_batch(key, batch)?);
        let (a, b) = f(&mut tape, &bound, xv, yv, kv)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }
}

/// Repeats a batch-1 tensor `batch` times; other batch sizes must already
/// match.
pub fn broadcast_batch<T: Scalar>(t: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if b == batch {
        return Ok(t.clone());
    }
    if b != 1 {
        return Err(Error::shape(
            "broadcast_batch",
            format!("cannot broadcast batch {b} to {batch}"),
        ));
    }
    let mut data = Vec::with_capacity(batch * t.len());
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[batch, c, h, w], data)
}

#[derive(Clone, Debug)]
pub struct BoundSubnet {
    /// `(weight, bias)` per layer.
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct BoundSacb {
    pub omega: BoundSubnet,
    pub phi: BoundSubnet,
    pub rho: BoundSubnet,
    pub eta: BoundSubnet,
}

/// A model whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundFlow {
    pub blocks: Vec<BoundSacb>,
    pub alpha: f64,
}

impl BoundFlow {
    /// Parameter handles in the same order as [`FlowModel::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.omega, &b.phi, &b.rho, &b.eta])
            .flat_map(|s| s.layers.iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }
}

pub fn subnet_eval<T: Scalar>(tape: &mut Tape<T>, net: &BoundSubnet, input: Var) -> Result<Var> {
    let expected = FEATURE_CHANNELS + KEY_CHANNELS;
    let got = tape.value(input).dims4()?.1;
    if got != expected {
        return Err(Error::shape(
            "subnet_eval",
            format!("expected {expected} input channels, got {got}"),
        ));
    }
    let mut features = vec![input];
    let last = net.layers.len() - 1;
    for (i, &(w, b)) in net.layers.iter().enumerate() {
        let x = if features.len() == 1 {
            features[0]
        } else {
            tape.concat_channels(&features)?
        };
        let h = tape.conv2d(x, w, b)?;
        if i == last {
            return Ok(h);
        }
        features.push(tape.leaky_relu(h, LEAKY_SLOPE));
    }
    unreachable!("subnets have at least one layer")
}

/// `alpha * (2 * sigmoid(t) - 1)`.
fn scale_activation<T: Scalar>(tape: &mut Tape<T>, t: Var, alpha: f64) -> Var {
    let s = tape.sigmoid(t);
    let s = tape.scale(s, 2.0 * alpha);
    tape.offset(s, -alpha)
}

/// `exp(sign * a(net(input)))`.
fn scale_factor<T: Scalar>(tape: &mut Tape<T>, net: &BoundSubnet, input: Var, alpha: f64, sign: f64) -> Result<Var> {
    let raw = subnet_eval(tape, net, input)?;
    let a = scale_activation(tape, raw, alpha);
    let a = if sign < 0.0 { tape.scale(a, -1.0) } else { a };
    Ok(tape.exp(a))
}

pub fn sacb_forward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &BoundSacb,
    alpha: f64,
    x: Var,
    y: Var,
    key: Var,
) -> Result<(Var, Var)> {
    let xk = tape.concat_channels(&[x, key])?;
    let s = scale_factor(tape, &block.omega, xk, alpha, 1.0)?;
    let t = subnet_eval(tape, &block.phi, xk)?;
    let ys = tape.mul(y, s)?;
    let y_next = tape.add(ys, t)?;

    let yk = tape.concat_channels(&[y_next, key])?;
    let s = scale_factor(tape, &block.rho, yk, alpha, 1.0)?;
    let t = subnet_eval(tape, &block.eta, yk)?;
    let xs = tape.mul(x, s)?;
    let x_next = tape.add(xs, t)?;
    Ok((x_next, y_next))
}

pub fn sacb_backward<T: Scalar>(
    tape: &mut Tape<T>,
    block: &BoundSacb,
    alpha: f64,
    x_next: Var,
    y_next: Var,
    key: Var,
) -> Result<(Var, Var)> {
    let yk = tape.concat_channels(&[y_next, key])?;
    let t = subnet_eval(tape, &block.eta, yk)?;
    let s = scale_factor(tape, &block.rho, yk, alpha, -1.0)?;
    let diff = tape.sub(x_next, t)?;
    let x = tape.mul(diff, s)?;

    let xk = tape.concat_channels(&[x, key])?;
    let t = subnet_eval(tape, &block.phi, xk)?;
    let s = scale_factor(tape, &block.omega, xk, alpha, -1.0)?;
    let diff = tape.sub(y_next, t)?;
    let y = tape.mul(diff, s)?;
    Ok((x, y))
}

pub fn flow_forward<T: Scalar>(tape: &mut Tape<T>, flow: &BoundFlow, x: Var, y: Var, key: Var) -> Result<(Var, Var)> {
    flow.blocks
        .iter()
        .try_fold((x, y), |(x, y), b| sacb_forward(tape, b, flow.alpha, x, y, key))
}

pub fn flow_backward<T: Scalar>(tape: &mut Tape<T>, flow: &BoundFlow, x: Var, y: Var, key: Var) -> Result<(Var, Var)> {
    flow.blocks
        .iter()
        .rev()
        .try_fold((x, y), |(x, y), b| sacb_backward(tape, b, flow.alpha, x, y, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(blocks: usize, growth: usize) -> FlowConfig {
        FlowConfig {
            blocks,
            growth,
            side: 8,
            ..FlowConfig::default()
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
    }

    #[test]
    fn default_parameter_budget() {
        let cfg = FlowConfig::default();
        assert_eq!(cfg.param_count(), 1_073_040);
        let model = FlowModel::<f32>::init(cfg, 0).unwrap();
        assert_eq!(model.param_count(), 1_073_040);
    }

    #[test]
    fn dense_channel_accounting() {
        let chans = FlowConfig::default().layer_channels();
        assert_eq!(chans, vec![(32, 16), (32, 48), (32, 80), (32, 112), (12, 144)]);
    }

    #[test]
    fn init_is_seeded_and_identity() {
        let a = FlowModel::<f32>::init(small_config(2, 4), 5).unwrap();
        assert_eq!(a, FlowModel::init(small_config(2, 4), 5).unwrap());
        assert_ne!(a, FlowModel::init(small_config(2, 4), 6).unwrap());

        let x = noise(&[2, 12, 4, 4], 1);
        let y = noise(&[2, 12, 4, 4], 2);
        let k = noise(&[1, 4, 4, 4], 3);
        let (xo, yo) = a.forward(&x, &y, &k).unwrap();
        assert_eq!((xo, yo), (x.clone(), y.clone()));
        let (xb, yb) = a.backward(&x, &y, &k).unwrap();
        assert_eq!((xb, yb), (x, y));
    }

    #[test]
    fn zero_subnet_outputs_zero() {
        let model = FlowModel::<f32>::init(small_config(1, 4), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let input = tape.constant(noise(&[3, 16, 4, 6], 9));
        let out = subnet_eval(&mut tape, &bound.blocks[0].phi, input).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 12, 4, 6]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        let wrong = tape.constant(Tensor::zeros(&[1, 12, 4, 4]));
        assert!(subnet_eval(&mut tape, &bound.blocks[0].phi, wrong).is_err());
    }

    #[test]
    fn block_roundtrip_and_key_sensitivity() {
        for seed in 0..10 {
            let model = FlowModel::<f32>::init_perturbed(small_config(1, 8), seed, 0.05).unwrap();
            let x = noise(&[1, 12, 4, 4], 100 + seed);
            let y = noise(&[1, 12, 4, 4], 200 + seed);
            let k = noise(&[1, 4, 4, 4], 300 + seed);
            let (xf, yf) = model.forward(&x, &y, &k).unwrap();
            let (xb, yb) = model.backward(&xf, &yf, &k).unwrap();
            assert!(xb.max_abs_diff(&x).unwrap() < 1e-4);
            assert!(yb.max_abs_diff(&y).unwrap() < 1e-4);

            let other = noise(&[1, 4, 4, 4], 400 + seed);
            let (xw, yw) = model.backward(&xf, &yf, &other).unwrap();
            let err = xw.max_abs_diff(&x).unwrap().max(yw.max_abs_diff(&y).unwrap());
            assert!(err > 0.01, "wrong key reproduced the input (err {err})");
        }
    }

    #[test]
    fn single_block_flow_equals_sacb() {
        let model = FlowModel::<f32>::init_perturbed(small_config(1, 4), 3, 0.1).unwrap();
        let x = noise(&[1, 12, 4, 4], 1);
        let y = noise(&[1, 12, 4, 4], 2);
        let k = noise(&[1, 4, 4, 4], 3);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let (xv, yv, kv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(k.clone()));
        let (a, b) = sacb_forward(&mut tape, &bound.blocks[0], 2.0, xv, yv, kv).unwrap();
        let (fa, fb) = model.forward(&x, &y, &k).unwrap();
        assert_eq!((tape.value(a), tape.value(b)), (&fa, &fb));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(FlowModel::<f32>::init(small_config(0, 4), 0).is_err());
        assert!(FlowModel::<f32>::init(small_config(1, 0), 0).is_err());
        let mut cfg = small_config(1, 4);
        cfg.alpha = 0.0;
        assert!(FlowModel::<f32>::init(cfg.clone(), 0).is_err());
        cfg.alpha = 2.0;
        cfg.side = 7;
        assert!(FlowModel::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [WrongRecoveryMode::Randomized, WrongRecoveryMode::Obfuscated] {
            assert_eq!(WrongRecoveryMode::parse(m.name()).unwrap(), m);
        }
        assert!(WrongRecoveryMode::parse("nope").is_err());
    }
}

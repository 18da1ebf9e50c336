//! Executable networks: parameters, forward trace, backpropagation and the
//! `SEGMAP01` weight file.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{LayerKind, NetworkSpec, OutputKind, CHANNELS, PATCH};
use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, LayerParams, PoolRecord};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv { param: usize },
    Relu,
    Pool { slot: usize },
    Unpool { slot: usize },
    Flatten,
    Dense { param: usize },
}

#[derive(Debug, Clone)]
struct ParamInfo {
    name: String,
    weight_shape: Vec<usize>,
    /// Init variance multiplier; above 1 for convolutions reading a sparse
    /// unpooled map, where only one position in `gain` is nonzero on average.
    gain: f64,
}

/// Lowers a layer spec into primitive ops plus parameter shapes.
fn compile(spec: &NetworkSpec) -> (Vec<Op>, Vec<ParamInfo>) {
    let mut ops = Vec::new();
    let mut params = Vec::new();
    let mut push_param = |name: String, shape: Vec<usize>, gain: f64| {
        params.push(ParamInfo {
            name,
            weight_shape: shape,
            gain,
        });
        params.len() - 1
    };

    let mut channels = CHANNELS;
    let mut side = PATCH;
    let mut encoder_channels = Vec::new();
    let mut encoder_sides = Vec::new();
    let mut vgg = 0;
    let mut fc = 0;
    let mut dvgg = 0;
    for layer in spec.layers() {
        match layer.kind {
            LayerKind::Vgg => {
                vgg += 1;
                for j in 1..=2 {
                    let p = push_param(format!("vgg{vgg}.conv{j}"), vec![layer.width, 3, 3, channels], 1.0);
                    ops.push(Op::Conv { param: p });
                    ops.push(Op::Relu);
                    channels = layer.width;
                }
                encoder_channels.push(channels);
                encoder_sides.push(side);
                ops.push(Op::Pool { slot: vgg - 1 });
                side = (side - 3) / 2 + 1;
            }
            LayerKind::Fc => {
                if fc == 0 {
                    ops.push(Op::Flatten);
                    channels *= side * side;
                }
                fc += 1;
                let p = push_param(format!("fc{fc}"), vec![layer.width, channels], 1.0);
                ops.push(Op::Dense { param: p });
                ops.push(Op::Relu);
                channels = layer.width;
            }
            LayerKind::DVgg => {
                dvgg += 1;
                let slot = encoder_channels.len() - dvgg;
                ops.push(Op::Unpool { slot });
                let unpooled = encoder_sides[slot];
                let density = (side * side) as f64 / (unpooled * unpooled) as f64;
                side = unpooled;
                // The second convolution emits the channel count the next
                // unpool's indices were recorded with.
                let out2 = if slot > 0 {
                    encoder_channels[slot - 1]
                } else {
                    layer.width
                };
                for (j, out, gain) in [(1, layer.width, 1.0 / density), (2, out2, 1.0)] {
                    let p = push_param(format!("dvgg{dvgg}.conv{j}"), vec![out, 3, 3, channels], gain);
                    ops.push(Op::Conv { param: p });
                    ops.push(Op::Relu);
                    channels = out;
                }
            }
            LayerKind::Softmax2 => match spec.output() {
                OutputKind::ScalarProbability => {
                    if fc == 0 {
                        ops.push(Op::Flatten);
                        channels *= side * side;
                    }
                    let p = push_param("head".into(), vec![2, channels], 1.0);
                    ops.push(Op::Dense { param: p });
                }
                OutputKind::DenseProbabilityMap => {
                    let p = push_param("head".into(), vec![2, 1, 1, channels], 1.0);
                    ops.push(Op::Conv { param: p });
                }
            },
        }
    }
    (ops, params)
}

/// How [`Network::new`] initializes parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Zero-mean uniform on `±sqrt(6 / fan_in)`, biases zero. Convolutions
    /// reading an unpooled map scale the variance by the inverse of its
    /// nonzero density (pre-pool area over pooled area).
    FanInUniform {
        seed: u64,
    },
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    ops: Vec<Op>,
    names: Vec<String>,
    params: Vec<LayerParams<T>>,
}

#[derive(Debug, Clone)]
enum Step<T> {
    Conv(ConvCache<T>),
    Relu(Tensor<T>),
    Pool,
    Unpool,
    Flatten(Vec<usize>),
    Dense(Tensor<T>),
}

/// Cached activations from one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    steps: Vec<Step<T>>,
    pools: Vec<PoolRecord<T>>,
    sizes: Vec<(usize, usize)>,
}

impl<T> ForwardTrace<T> {
    /// Spatial `(height, width)` after each pool and unpool, in order.
    pub fn resample_sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }
}

/// A network's prediction for one patch.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Scalar(f64),
    /// Row-major 41×41 panel probabilities.
    Map(Vec<f64>),
}

/// Number of softmax locations per patch for an output kind.
pub fn output_locations(kind: OutputKind) -> usize {
    match kind {
        OutputKind::ScalarProbability => 1,
        OutputKind::DenseProbabilityMap => PATCH * PATCH,
    }
}

impl<T: Real> Network<T> {
    pub fn new(spec: &NetworkSpec, init: Init) -> Self {
        let (ops, infos) = compile(spec);
        let mut rng = match init {
            Init::FanInUniform { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        let params = infos
            .iter()
            .map(|info| {
                let shape = &info.weight_shape;
                let n: usize = shape.iter().product();
                let fan_in = n / shape[0];
                let bound = (6.0 * info.gain / fan_in as f64).sqrt();
                let data = match rng.as_mut() {
                    Some(rng) => (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect(),
                    None => vec![T::zero(); n],
                };
                LayerParams {
                    weight: Tensor::from_vec(shape, data).expect("compiled shape"),
                    bias: Tensor::zeros(&[shape[0]]),
                }
            })
            .collect();
        Network {
            spec: spec.clone(),
            ops,
            names: infos.into_iter().map(|i| i.name).collect(),
            params,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Zeroed gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<LayerParams<T>> {
        self.params.iter().map(LayerParams::zeros_like).collect()
    }

    /// Zeroes the final two-way layer, making every prediction exactly 0.5.
    pub fn zero_head(&mut self) {
        let head = self.params.last_mut().expect("networks have a head");
        head.weight.fill(T::zero());
        head.bias.fill(T::zero());
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.spec.input_shape() {
            return Err(Error::shape(format!(
                "network input must be {:?}, got {:?}",
                self.spec.input_shape(),
                input.shape()
            )));
        }
        Ok(())
    }

    /// Raw two-way logits: `[2]` for the classifier, `[41, 41, 2]` for the segmenter.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(input, None)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut trace = ForwardTrace::default();
        let out = self.run(input, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(&self, input: &Tensor<T>, mut trace: Option<&mut ForwardTrace<T>>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut pools: Vec<PoolRecord<T>> = Vec::new();
        for op in &self.ops {
            x = match *op {
                Op::Conv { param } => {
                    let (y, cache) = nn::conv2d_forward(&x, &self.params[param])?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Conv(cache));
                    }
                    y
                }
                Op::Relu => {
                    let y = nn::relu(&x);
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Relu(x));
                    }
                    y
                }
                Op::Pool { slot } => {
                    debug_assert_eq!(slot, pools.len());
                    let record = nn::maxpool3x3s2(&x)?;
                    let y = record.pooled.clone();
                    pools.push(record);
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Pool);
                        t.sizes.push((y.shape()[0], y.shape()[1]));
                    }
                    y
                }
                Op::Unpool { slot } => {
                    let y = nn::max_unpool(&x, &pools[slot])?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Unpool);
                        t.sizes.push((y.shape()[0], y.shape()[1]));
                    }
                    y
                }
                Op::Flatten => {
                    let shape = x.shape().to_vec();
                    let n = x.len();
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Flatten(shape));
                    }
                    x.reshape(&[n])?
                }
                Op::Dense { param } => {
                    let y = nn::dense(&x, &self.params[param])?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(Step::Dense(x));
                    }
                    y
                }
            };
        }
        if let Some(t) = trace {
            t.pools = pools;
        }
        Ok(x)
    }

    /// Backpropagates `grad_logits` through a trace from [`Network::forward_trace`],
    /// accumulating into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
        grads: &mut [LayerParams<T>],
    ) -> Result<()> {
        if trace.steps.len() != self.ops.len() {
            return Err(Error::MissingTrace);
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape("gradient buffer count does not match parameters"));
        }
        let mut g = grad_logits.clone();
        for (i, (op, step)) in self.ops.iter().zip(&trace.steps).enumerate().rev() {
            g = match (*op, step) {
                (Op::Conv { param }, Step::Conv(cache)) => {
                    let dx = nn::conv2d_backward(cache, &self.params[param], &g, &mut grads[param], i > 0)?;
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Op::Relu, Step::Relu(input)) => nn::relu_backward(input, &g)?,
                (Op::Pool { slot }, Step::Pool) => {
                    let record = trace.pools.get(slot).ok_or(Error::MissingTrace)?;
                    nn::maxpool_backward(record, &g)?
                }
                (Op::Unpool { slot }, Step::Unpool) => {
                    let record = trace.pools.get(slot).ok_or(Error::MissingTrace)?;
                    nn::max_unpool_backward(record, &g)?
                }
                (Op::Flatten, Step::Flatten(shape)) => g.reshape(shape)?,
                (Op::Dense { param }, Step::Dense(input)) => {
                    nn::dense_backward(input, &self.params[param], &g, &mut grads[param])?
                }
                _ => return Err(Error::MissingTrace),
            };
        }
        Ok(())
    }

    /// Panel probability for one patch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction> {
        let probs = nn::softmax2(&self.logits(input)?)?;
        let panel = probs.data().chunks_exact(2).map(|p| p[1].as_f64());
        Ok(match self.spec.output() {
            OutputKind::ScalarProbability => Prediction::Scalar(panel.last().expect("two logits")),
            OutputKind::DenseProbabilityMap => Prediction::Map(panel.collect()),
        })
    }

    /// Serializes every parameter tensor (`<layer>.weight`, `<layer>.bias`).
    pub fn to_records(&self) -> Vec<WeightRecord> {
        self.names
            .iter()
            .zip(&self.params)
            .flat_map(|(name, p)| {
                [("weight", &p.weight), ("bias", &p.bias)].map(|(suffix, t)| WeightRecord {
                    name: format!("{name}.{suffix}"),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
            })
            .collect()
    }

    pub fn from_records(spec: &NetworkSpec, records: &[WeightRecord]) -> Result<Self> {
        let mut net = Network::new(spec, Init::Zeros);
        let expected = net.to_records();
        if expected.len() != records.len() {
            return Err(Error::format(
                "weight file",
                format!("{} records, network needs {}", records.len(), expected.len()),
            ));
        }
        for (i, (want, got)) in expected.iter().zip(records).enumerate() {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::format(
                    "weight file",
                    format!(
                        "record {} is {} {:?}, expected {} {:?}",
                        i, got.name, got.shape, want.name, want.shape
                    ),
                ));
            }
            let p = &mut net.params[i / 2];
            let t = if i % 2 == 0 { &mut p.weight } else { &mut p.bias };
            for (d, &s) in t.data_mut().iter_mut().zip(&got.values) {
                *d = T::lit(s as f64);
            }
        }
        Ok(net)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_weights(&mut buf, &self.to_records()).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(spec: &NetworkSpec, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Network::from_records(spec, &read_weights(&mut bytes.as_slice())?)
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            ops: self.ops.clone(),
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
                .collect(),
        }
    }
}

/// Scales 8-bit interleaved RGB to a `[41, 41, 3]` tensor in `[0, 1]`.
pub fn patch_tensor<T: Real>(pixels: &[u8]) -> Result<Tensor<T>> {
    Tensor::from_vec(
        &[PATCH, PATCH, CHANNELS],
        pixels.iter().map(|&v| T::lit(v as f64 / 255.0)).collect(),
    )
}

/// One named parameter tensor of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SEGMAP01";

/// `SEGMAP01`, then per record: name length (u64), UTF-8 name, rank (u64),
/// dims (u64 each), values (f32). All little-endian; records run to EOF.
pub fn write_weights<W: Write>(w: &mut W, records: &[WeightRecord]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    for r in records {
        w.write_all(&(r.name.len() as u64).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u64).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<Vec<WeightRecord>> {
    let corrupt = |d: &str| Error::format("weight file", d.to_string());
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| corrupt(&e.to_string()))?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt("truncated record"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != WEIGHTS_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut records = Vec::new();
    loop {
        let Ok(len) = take(8) else { break };
        let name_len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(corrupt("implausible name length"));
        }
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(corrupt("implausible rank"));
        }
        let shape = (0..rank)
            .map(|_| take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflow"))?;
        let raw = take(n.checked_mul(4).ok_or_else(|| corrupt("shape overflow"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(WeightRecord { name, shape, values });
    }
    Ok(records)
}

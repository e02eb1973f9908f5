//! Dense networks: the classifier (encoder + head) with a semantic-feature
//! tap, the class-conditional generator, and the 4-way pair discriminator.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Op, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Softmax,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }

    fn op(self) -> Option<Op> {
        match self {
            Activation::Linear => None,
            Activation::Relu => Some(Op::Relu),
            Activation::Tanh => Some(Op::Tanh),
            Activation::Softmax => Some(Op::Softmax { axis: 1 }),
        }
    }
}

/// Fully connected layer `act(x W + b)` with `W` of shape `inputs x outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    /// Uniform initialisation in `+-1/sqrt(inputs)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::matrix(inputs, outputs, draw(inputs * outputs)).expect("weight shape");
        let bias = Tensor::vector(draw(outputs));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = Op::MatMul.eval(&[x, &self.weight])?;
        let z = Op::RowBroadcast.eval(&[&z, &self.bias])?;
        match self.activation.op() {
            Some(op) => op.eval(&[&z]),
            None => Ok(z),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
    activation: Activation,
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// An [`Mlp`] whose parameters have been placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundDense>,
}

impl BoundMlp {
    /// Parameter handles in the same order as [`Mlp::blocks`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }
}

impl Mlp {
    /// Layers of the given widths; `hidden` layers use `hidden_act`, the last
    /// uses `output_act`.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output_act } else { hidden_act };
                Dense::init(widths[k], widths[k + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Outputs of every layer, in order.
    pub fn forward_taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = taps.last().unwrap_or(x);
            let out = layer.forward(input)?;
            taps.push(out);
        }
        Ok(taps)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut taps = self.forward_taps(x)?;
        Ok(taps.pop().unwrap_or_else(|| x.clone()))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundDense {
                weight: put(&l.weight),
                bias: put(&l.bias),
                activation: l.activation,
            })
            .collect();
        BoundMlp { layers }
    }

    pub fn forward_taps_tape(tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(bound.layers.len());
        let mut cur = x;
        for layer in &bound.layers {
            let z = tape.matmul(cur, layer.weight)?;
            let z = tape.row_broadcast(z, layer.bias)?;
            cur = match layer.activation.op() {
                Some(op) => tape.apply(op, &[z])?,
                None => z,
            };
            taps.push(cur);
        }
        Ok(taps)
    }

    pub fn forward_tape(tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        Ok(Self::forward_taps_tape(tape, bound, x)?.pop().unwrap_or(x))
    }

    pub fn blocks(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    (format!("{prefix}.{k}.weight"), &l.weight),
                    (format!("{prefix}.{k}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    (format!("{prefix}.{k}.weight"), &mut l.weight),
                    (format!("{prefix}.{k}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    fn write_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.set_meta(&format!("{prefix}.layers"), &self.layers.len().to_string());
        for (k, layer) in self.layers.iter().enumerate() {
            ckpt.set_meta(&format!("{prefix}.{k}.activation"), layer.activation.tag());
        }
        for (name, t) in self.blocks(prefix) {
            ckpt.push_block(&name, t.clone());
        }
    }

    fn read_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let n: usize = ckpt.meta_parse(&format!("{prefix}.layers"))?;
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let activation = Activation::from_tag(ckpt.meta(&format!("{prefix}.{k}.activation"))?)?;
            let weight = ckpt.block(&format!("{prefix}.{k}.weight"))?.clone();
            let bias = ckpt.block(&format!("{prefix}.{k}.bias"))?.clone();
            if weight.rank() != 2 || bias.len() != weight.cols() {
                return Err(Error::Checkpoint(format!(
                    "layer {prefix}.{k} has inconsistent shapes {:?} / {:?}",
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Checkpoint(format!("{prefix}: layer widths do not chain")));
            }
        }
        Ok(Self { layers })
    }

    fn hash_into(&self, h: &mut DefaultHasher) {
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                h.write_u64(v.to_bits());
            }
        }
    }
}

/// Network sizes. Defaults are sized for low-dimensional synthetic tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub semantic_layer_index: usize,
    pub noise_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![32, 16],
            semantic_layer_index: 0,
            noise_dim: 8,
            generator_hidden: vec![32, 32],
            discriminator_hidden: vec![16],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden.is_empty() || self.encoder_hidden.contains(&0) {
            return Err(Error::config(
                "architecture.encoder_hidden",
                "needs at least one positive width",
            ));
        }
        if self.semantic_layer_index >= self.encoder_hidden.len() {
            return Err(Error::config(
                "architecture.semantic_layer_index",
                format!(
                    "{} does not address one of the {} encoder layers",
                    self.semantic_layer_index,
                    self.encoder_hidden.len()
                ),
            ));
        }
        if self.noise_dim == 0 {
            return Err(Error::config("architecture.noise_dim", "must be positive"));
        }
        if self.generator_hidden.contains(&0) {
            return Err(Error::config(
                "architecture.generator_hidden",
                "widths must be positive",
            ));
        }
        if self.discriminator_hidden.contains(&0) {
            return Err(Error::config(
                "architecture.discriminator_hidden",
                "widths must be positive",
            ));
        }
        Ok(())
    }
}

/// Taps of one classifier pass.
#[derive(Clone, Debug)]
pub struct ClassifierOutput<T> {
    /// Output of the last encoder layer; the discriminator's pair input.
    pub encoder_feature: T,
    /// Output of the encoder layer selected as the semantic feature.
    pub semantic_feature: T,
    pub probs: T,
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    pub encoder: BoundMlp,
    pub head: BoundMlp,
}

impl BoundClassifier {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.head.vars());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub encoder: Mlp,
    pub head: Mlp,
    pub semantic_layer_index: usize,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, classes: usize, arch: &Architecture, rng: &mut R) -> Self {
        let mut widths = vec![input_dim];
        widths.extend(&arch.encoder_hidden);
        let encoder = Mlp::init(&widths, Activation::Relu, Activation::Relu, rng);
        let head = Mlp::init(
            &[encoder.output_dim(), classes],
            Activation::Relu,
            Activation::Softmax,
            rng,
        );
        Self {
            encoder,
            head,
            semantic_layer_index: arch.semantic_layer_index,
        }
    }

    pub fn new(encoder: Mlp, head: Mlp, semantic_layer_index: usize) -> Result<Self> {
        let params = Self {
            encoder,
            head,
            semantic_layer_index,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if self.semantic_layer_index >= self.encoder.layers.len() {
            return Err(Error::invalid(format!(
                "semantic layer {} does not exist in a {}-layer encoder",
                self.semantic_layer_index,
                self.encoder.layers.len()
            )));
        }
        if self.head.input_dim() != self.encoder.output_dim() {
            return Err(Error::invalid("head input does not match encoder output"));
        }
        if self.head.layers.last().map(|l| l.activation) != Some(Activation::Softmax) {
            return Err(Error::invalid("classifier head must end in softmax"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.encoder.layers[self.semantic_layer_index].outputs()
    }

    /// All three taps from a single forward pass.
    pub fn classify(&self, x: &Tensor) -> Result<ClassifierOutput<Tensor>> {
        self.check_input(x.cols())?;
        let mut taps = self.encoder.forward_taps(x)?;
        let semantic_feature = taps[self.semantic_layer_index].clone();
        let encoder_feature = taps.pop().expect("non-empty encoder");
        let probs = self.head.forward(&encoder_feature)?;
        Ok(ClassifierOutput {
            encoder_feature,
            semantic_feature,
            probs,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.classify(x)?.probs;
        Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            encoder: self.encoder.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    pub fn classify_tape(&self, tape: &mut Tape, bound: &BoundClassifier, x: Var) -> Result<ClassifierOutput<Var>> {
        self.check_input(tape.value(x).cols())?;
        let taps = Mlp::forward_taps_tape(tape, &bound.encoder, x)?;
        let encoder_feature = *taps.last().expect("non-empty encoder");
        let probs = Mlp::forward_tape(tape, &bound.head, encoder_feature)?;
        Ok(ClassifierOutput {
            encoder_feature,
            semantic_feature: taps[self.semantic_layer_index],
            probs,
        })
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape {
                op: "classify",
                lhs: vec![cols],
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut b = self.encoder.blocks_mut("encoder");
        b.extend(self.head.blocks_mut("head"));
        b
    }

    pub fn head_blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.head.blocks_mut("head")
    }

    pub fn block_lens(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.encoder.blocks("encoder").iter().map(|(_, t)| t.len()).collect();
        b.extend(self.head.blocks("head").iter().map(|(_, t)| t.len()));
        b
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.encoder.hash_into(&mut h);
        self.head.hash_into(&mut h);
        h.finish()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("model", "classifier");
        ckpt.set_meta("semantic_layer_index", &self.semantic_layer_index.to_string());
        self.encoder.write_checkpoint("encoder", &mut ckpt);
        self.head.write_checkpoint("head", &mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_model(ckpt, "classifier")?;
        Self::new(
            Mlp::read_checkpoint("encoder", ckpt)?,
            Mlp::read_checkpoint("head", ckpt)?,
            ckpt.meta_parse("semantic_layer_index")?,
        )
    }
}

fn expect_model(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found = ckpt.meta("model")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Class-conditional generator: noise concatenated with a one-hot class code,
/// mapped through layers shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub net: Mlp,
    pub noise_dim: usize,
    pub classes: usize,
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(classes: usize, data_dim: usize, arch: &Architecture, rng: &mut R) -> Self {
        let mut widths = vec![arch.noise_dim + classes];
        widths.extend(&arch.generator_hidden);
        widths.push(data_dim);
        Self {
            net: Mlp::init(&widths, Activation::Relu, Activation::Linear, rng),
            noise_dim: arch.noise_dim,
            classes,
        }
    }

    pub fn new(net: Mlp, noise_dim: usize, classes: usize) -> Result<Self> {
        if net.input_dim() != noise_dim + classes {
            return Err(Error::invalid(format!(
                "generator input width {} != noise {noise_dim} + classes {classes}",
                net.input_dim()
            )));
        }
        Ok(Self {
            net,
            noise_dim,
            classes,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn conditioned_input(&self, z: &Tensor, class: usize) -> Result<Tensor> {
        if class >= self.classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.classes
            )));
        }
        if z.rank() != 2 || z.cols() != self.noise_dim {
            return Err(Error::Shape {
                op: "generate",
                lhs: z.shape().to_vec(),
                rhs: vec![self.noise_dim],
            });
        }
        let mut code = Tensor::zeros(&[z.rows(), self.classes]);
        for i in 0..z.rows() {
            code.set(i, class, 1.0);
        }
        Op::Concat { axis: 1 }.eval(&[z, &code])
    }

    pub fn generate(&self, z: &Tensor, class: usize) -> Result<Tensor> {
        let input = self.conditioned_input(z, class)?;
        self.net.forward(&input)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn generate_tape(&self, tape: &mut Tape, bound: &BoundMlp, z: &Tensor, class: usize) -> Result<Var> {
        let input = self.conditioned_input(z, class)?;
        let x = tape.constant(input);
        Mlp::forward_tape(tape, bound, x)
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net.blocks_mut("generator")
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.net.blocks("generator").iter().map(|(_, t)| t.len()).collect()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.net.hash_into(&mut h);
        h.finish()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("model", "generator");
        ckpt.set_meta("noise_dim", &self.noise_dim.to_string());
        ckpt.set_meta("classes", &self.classes.to_string());
        self.net.write_checkpoint("generator", &mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_model(ckpt, "generator")?;
        Self::new(
            Mlp::read_checkpoint("generator", ckpt)?,
            ckpt.meta_parse("noise_dim")?,
            ckpt.meta_parse("classes")?,
        )
    }
}

/// Four-way classifier over concatenated pair features.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub net: Mlp,
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, arch: &Architecture, rng: &mut R) -> Self {
        let mut widths = vec![2 * feature_dim];
        widths.extend(&arch.discriminator_hidden);
        widths.push(4);
        Self {
            net: Mlp::init(&widths, Activation::Relu, Activation::Softmax, rng),
        }
    }

    pub fn new(net: Mlp) -> Result<Self> {
        if net.output_dim() != 4 || net.layers.last().map(|l| l.activation) != Some(Activation::Softmax) {
            return Err(Error::invalid("discriminator must end in a 4-way softmax"));
        }
        Ok(Self { net })
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.net.input_dim() {
            return Err(Error::Shape {
                op: "discriminate",
                lhs: vec![cols],
                rhs: vec![self.net.input_dim()],
            });
        }
        Ok(())
    }

    pub fn discriminate(&self, pair_features: &Tensor) -> Result<Tensor> {
        self.check_input(pair_features.cols())?;
        self.net.forward(pair_features)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn discriminate_tape(&self, tape: &mut Tape, bound: &BoundMlp, pair_features: Var) -> Result<Var> {
        self.check_input(tape.value(pair_features).cols())?;
        Mlp::forward_tape(tape, bound, pair_features)
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net.blocks_mut("discriminator")
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.net.blocks("discriminator").iter().map(|(_, t)| t.len()).collect()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.net.hash_into(&mut h);
        h.finish()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("model", "discriminator");
        self.net.write_checkpoint("discriminator", &mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_model(ckpt, "discriminator")?;
        Self::new(Mlp::read_checkpoint("discriminator", ckpt)?)
    }
}

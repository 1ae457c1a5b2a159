use rand::Rng;

use crate::error::Result;
use crate::ndgrad::{Matrix, Tape, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Records every tensor on the tape, in store order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m)
                } else {
                    tape.constant_ref(m)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

/// Affine map `x·W + 1·b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        act: Activation,
        rng: &mut R,
    ) -> Linear {
        // He scaling ahead of ReLU, Glorot-style otherwise.
        let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Matrix::random_normal(fan_in, fan_out, 0.0, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.weight.0])?;
        tape.add_row_bias(h, vars[self.bias.0])
    }

    /// Same as [`Linear::forward`] with the input product already computed.
    pub fn add_bias(&self, tape: &mut Tape<'_>, vars: &[Var], xw: Var) -> Result<Var> {
        tape.add_row_bias(xw, vars[self.bias.0])
    }
}

fn activate(tape: &mut Tape<'_>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Linear => x,
    }
}

/// Stack of affine layers: ReLU between layers, `output` after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    /// `widths` lists every layer's output width; the last is the MLP output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        widths: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Mlp {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let act = if l + 1 == widths.len() {
                    output
                } else {
                    Activation::Relu
                };
                let layer = Linear::new(store, &format!("{name}.{l}"), fan_in, w, act, rng);
                fan_in = w;
                layer
            })
            .collect();
        Mlp { layers, output }
    }

    fn act(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            h = activate(tape, self.act(l), h);
        }
        Ok(h)
    }

    /// Forward without the output activation.
    pub fn forward_pre_output(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if l < last {
                h = activate(tape, self.act(l), h);
            }
        }
        Ok(h)
    }

    /// Forward where the first layer's input product `x·W₀` is supplied by the
    /// caller (sparse inputs).
    pub fn forward_from_first_product(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        first_product: Var,
    ) -> Result<Var> {
        let mut h = self.layers[0].add_bias(tape, vars, first_product)?;
        h = activate(tape, self.act(0), h);
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(tape, vars, h)?;
            h = activate(tape, self.act(l), h);
        }
        Ok(h)
    }

    pub fn first_weight(&self) -> ParamId {
        self.layers[0].weight
    }
}

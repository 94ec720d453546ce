//! Small learnable building blocks shared by the decoders.

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Parameters bound to one tape, addressable by their dotted name.
#[derive(Default)]
pub struct Bindings {
    vars: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        let v = tape.param(t);
        self.vars.push((name, v));
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Copies tape gradients into every bound tensor; unbound tensors get
    /// their gradient cleared.
    pub fn pull_grads(&self, tape: &Tape, module: &mut dyn Module) {
        let index: std::collections::HashMap<&str, Var> = self.iter().collect();
        module.visit_params_mut("", &mut |name, t| match index.get(name) {
            Some(&v) => match tape.grad(v) {
                Some(g) => t.set_grad(g.to_vec()).expect("bound tensor shape"),
                None => t.set_grad(vec![0.0; t.numel()]).expect("bound tensor shape"),
            },
            None => t.zero_grad(),
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Anything owning learnable tensors.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√in` init for weights and bias.
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(&[input, output], w).expect("sized").into_param(),
            bias: Tensor::new(&[output], b).expect("sized").into_param(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]).into_param(),
            bias: Tensor::zeros(&[output]).into_param(),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zero_(&mut self) {
        self.weight.values_mut().fill(0.0);
        self.bias.values_mut().fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> LinearVars {
        LinearVars {
            weight: b.param(tape, join(prefix, "weight"), &self.weight),
            bias: b.param(tape, join(prefix, "bias"), &self.bias),
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`.
    pub fn new<R: Rng>(rng: &mut R, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an mlp needs input and output widths");
        Self {
            layers: dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect(),
        }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(Linear::output).unwrap_or(0)
    }

    pub fn last_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("non-empty mlp")
    }

    pub fn bind(&self, tape: &mut Tape, b: &mut Bindings, prefix: &str) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, b, &join(prefix, &i.to_string())))
                .collect(),
        }
    }

    /// Plain evaluation of one input row.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (l.input(), l.output());
            let w = l.weight.values();
            let mut y = l.bias.values().to_vec();
            for i in 0..n_in {
                let xi = h[i];
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += xi * w[i * n_out + j];
                }
            }
            if li + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = y;
        }
        h
    }
}

impl Module for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_forward_matches_row_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&mut rng, &[4, 6, 3]);
        let x = [0.3, -1.2, 0.7, 2.0, 0.1, 0.0, -0.4, 0.5];
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let vars = mlp.bind(&mut tape, &mut b, "m");
        let xv = tape.constant(&[2, 4], x.to_vec()).unwrap();
        let y = vars.forward(&mut tape, xv).unwrap();
        for r in 0..2 {
            let want = mlp.eval_row(&x[r * 4..r * 4 + 4]);
            for j in 0..3 {
                assert!((tape.value(y)[r * 3 + j] - want[j]).abs() < 1e-12);
            }
        }
        assert_eq!(b.len(), 4);
        assert!(b.get("m/1/bias").is_some());
    }

    #[test]
    fn pull_grads_fills_bound_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new(&mut rng, &[2, 3, 1]);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let vars = mlp.bind(&mut tape, &mut b, "");
        let x = tape.constant(&[1, 2], vec![0.5, -0.5]).unwrap();
        let y = vars.forward(&mut tape, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        b.pull_grads(&tape, &mut mlp);
        assert_eq!(mlp.layers[1].bias.grad(), Some(&[1.0][..]));
        assert_eq!(mlp.num_params(), 2 * 3 + 3 + 3 + 1);
    }
}

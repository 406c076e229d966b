//! Parameters, binding into graphs, and the layers shared by every network.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Grads, Var};
use crate::conv::ConvGeom;
use crate::tensor::Tensor;

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Anything owning a set of named parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Non-trainable named state (running statistics, power-iteration vectors).
    fn buffers(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    /// Restores state previously returned by [`Module::buffers`].
    fn load_buffer(&mut self, _name: &str, _value: &Tensor) -> bool {
        false
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Running-statistic update produced by a batch-statistics forward pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Turns parameters into graph leaves for one forward pass and maps the
/// resulting gradients back to parameter names.
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
    norm_updates: Vec<NormUpdate>,
}

impl Binder {
    /// Parameters become gradient-tracking leaves.
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            bound: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    /// Parameters become constants; no graph is retained for them.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            bound: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        if self.trainable {
            let v = Var::leaf(p.value.clone());
            self.bound.push((p.name.clone(), v.clone()));
            v
        } else {
            Var::constant(p.value.clone())
        }
    }

    pub fn record_norm(&mut self, update: NormUpdate) {
        self.norm_updates.push(update);
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    /// Gradient per parameter name, summed over every binding of that name.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in &self.bound {
            let Some(g) = grads.get(var) else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// He-normal initialization scaled by `gain`.
pub fn kaiming_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape, std, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Square kernel, He-normal weights multiplied by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_normal(&shape, cin * kernel * kernel, gain, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            geom,
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = b.bind(&self.weight);
        let bias = self.bias.as_ref().map(|p| b.bind(p));
        x.conv2d(&w, bias.as_ref(), self.geom)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_normal(&[fout, fin], fin, 1.0, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = b.bind(&self.weight);
        let bias = b.bind(&self.bias);
        x.linear(&w, Some(&bias))
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the current batch and report running-statistic updates.
    Batch,
    /// Normalize with stored running statistics.
    Running,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode) -> Var {
        let gamma = b.bind(&self.gamma);
        let beta = b.bind(&self.beta);
        match mode {
            NormMode::Running => x.batch_norm_eval(
                &gamma,
                &beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
            NormMode::Batch => {
                let (y, mean, var) = x.batch_norm_train(&gamma, &beta, self.eps);
                b.record_norm(NormUpdate {
                    name: self.name.clone(),
                    mean,
                    var,
                });
                y
            }
        }
    }

    pub fn apply_update(&mut self, update: &NormUpdate) {
        let m = self.momentum;
        for (r, v) in self.running_mean.iter_mut().zip(&update.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(&update.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let c = self.running_mean.len();
        vec![
            (
                format!("{}.running_mean", self.name),
                Tensor::new(&[c], self.running_mean.clone()),
            ),
            (
                format!("{}.running_var", self.name),
                Tensor::new(&[c], self.running_var.clone()),
            ),
        ]
    }

    pub fn load_buffer(&mut self, name: &str, value: &Tensor) -> bool {
        if name == format!("{}.running_mean", self.name) {
            self.running_mean = value.data().to_vec();
            true
        } else if name == format!("{}.running_var", self.name) {
            self.running_var = value.data().to_vec();
            true
        } else {
            false
        }
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        BatchNorm2d::buffers(self)
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> bool {
        BatchNorm2d::load_buffer(self, name, value)
    }
}

//! Layer descriptions shared by the VAE and the discriminator. A layer knows
//! its parameter names and shapes and how to run itself on a graph.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::conv::{ConvGeometry, TemporalPad};
use crate::model::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, T::one()),
            Init::FanIn(gain) => {
                let fan_in: usize = self.shape[1..].iter().product();
                Tensor::randn(&self.shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
            }
        }
    }
}

/// Allocates and initializes every parameter in `specs`, in order.
pub fn init_store<T: Real, R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(&s.name, s.sample(rng))?;
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub k: usize,
    pub geometry: ConvGeometry,
    pub init: Init,
}

impl Conv {
    /// `k×k` spatial kernel, `kt` temporal taps, "same" spatial padding.
    pub fn new(name: String, cin: usize, cout: usize, kt: usize, k: usize, stride: [usize; 3]) -> Self {
        Conv {
            name,
            cin,
            cout,
            kt,
            k,
            geometry: ConvGeometry::new(stride, [k / 2, k / 2], TemporalPad::ReflectFirstFrame),
            init: Init::FanIn(1.0),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            self.weight_name(),
            &[self.cout, self.cin, self.kt, self.k, self.k],
            self.init,
        ));
        out.push(ParamSpec::new(self.bias_name(), &[self.cout], Init::Zeros));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        g.conv3d(x, w, b, self.geometry)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl Norm {
    pub fn new(name: String, channels: usize, groups: usize) -> Self {
        Norm { name, channels, groups }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(format!("{}.gain", self.name), &[self.channels], Init::Ones));
        out.push(ParamSpec::new(format!("{}.shift", self.name), &[self.channels], Init::Zeros));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{}.gain", self.name))?;
        let shift = p.get(&format!("{}.shift", self.name))?;
        g.group_norm(x, gain, shift, self.groups, NORM_EPS)
    }
}

/// `shortcut(x) + conv_b(silu(norm2(conv_a(silu(norm1(x))))))`
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv_a: Conv,
    pub norm2: Norm,
    pub conv_b: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, groups: usize, kt_a: usize, kt_b: usize) -> Self {
        ResBlock {
            norm1: Norm::new(format!("{}.norm1", name), cin, groups),
            conv_a: Conv::new(format!("{}.conv_a", name), cin, cout, kt_a, 3, [1, 1, 1]),
            norm2: Norm::new(format!("{}.norm2", name), cout, groups),
            conv_b: Conv::new(format!("{}.conv_b", name), cout, cout, kt_b, 3, [1, 1, 1]),
            shortcut: (cin != cout).then(|| Conv::new(format!("{}.shortcut", name), cin, cout, 1, 1, [1, 1, 1])),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.conv_a.specs(out);
        self.norm2.specs(out);
        self.conv_b.specs(out);
        if let Some(s) = &self.shortcut {
            s.specs(out);
        }
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.conv_a, &self.conv_b];
        v.extend(self.shortcut.as_ref());
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = self.conv_a.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.conv_b.forward(g, p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

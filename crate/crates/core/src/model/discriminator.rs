//! Patch discriminator: a stack of (temporal) convolutions with leaky-ReLU
//! activations producing one real/fake logit per spatio-temporal patch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::config::ModelConfig;
use crate::model::layers::{init_store, Conv, ParamSpec};
use crate::model::params::{Bound, ParamStore};
use crate::model::vae::PIXEL_CHANNELS;
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub layers: Vec<Conv>,
}

impl Discriminator {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let kt = config.effective_temporal_kernel();
        let n = config.discriminator_layers;
        let ndf = config.base_channels;
        let mut layers = Vec::with_capacity(n);
        let mut cin = PIXEL_CHANNELS;
        for i in 0..n {
            let name = format!("disc.layer{}", i);
            if i + 1 == n {
                layers.push(Conv::new(name, cin, 1, kt, 3, [1, 1, 1]).zero_init());
            } else {
                let cout = ndf << i.min(3);
                let stride = if i < 2 { [1, 2, 2] } else { [1, 1, 1] };
                layers.push(Conv::new(name, cin, cout, kt, 3, stride));
                cin = cout;
            }
        }
        Ok(Discriminator { layers })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.specs(&mut out));
        out
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_store(&self.specs(), &mut rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Patch logits `(B, T, h, w, 1)` for a pixel video.
    pub fn discriminate<T: Real>(&self, params: &ParamStore<T>, video: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.input(video.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::conv3d_forward;

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let d = Discriminator::new(&ModelConfig::desk_video()).unwrap();
        let p = d.init_params::<f32>(1).unwrap();
        let video = Tensor::full(&[1, 5, 16, 16, 3], 0.3);
        let logits = d.discriminate(&p, &video).unwrap();
        assert_eq!(logits.shape(), &[1, 5, 4, 4, 1]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_input_is_accepted() {
        let d = Discriminator::new(&ModelConfig::desk_video()).unwrap();
        let p = d.init_params::<f32>(1).unwrap();
        let logits = d.discriminate(&p, &Tensor::full(&[2, 1, 8, 8, 3], 0.1)).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 2, 2, 1]);
    }

    #[test]
    fn matches_direct_forward_oracle() {
        use rand::SeedableRng;
        let d = Discriminator::new(&ModelConfig::desk_video()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = d.init_params::<f64>(2).unwrap();
        // give the last layer weights so the oracle is not trivially zero
        let last = d.layers.last().unwrap();
        let w = Tensor::randn(p.get(&last.weight_name()).unwrap().shape(), 0.1, &mut rng);
        *p.get_mut(&last.weight_name()).unwrap() = w;
        let video = Tensor::<f64>::randn(&[1, 3, 16, 16, 3], 1.0, &mut rng);
        let got = d.discriminate(&p, &video).unwrap();

        let mut h = video;
        for (i, l) in d.layers.iter().enumerate() {
            h = conv3d_forward(
                &h,
                p.get(&l.weight_name()).unwrap(),
                p.get(&l.bias_name()).unwrap(),
                &l.geometry,
            )
            .unwrap();
            if i + 1 < d.layers.len() {
                h = h.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            }
        }
        assert!(got.max_abs_diff(&h).unwrap() < 1e-12);
    }
}

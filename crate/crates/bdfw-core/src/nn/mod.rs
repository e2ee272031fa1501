//! Minimal CPU neural-network layers with explicit forward/backward passes.
//!
//! All tensors are f64. Feature maps are (N, C, H, W). The networks in
//! this crate are small and fixed, so each one composes these layers by
//! hand instead of going through a general autodiff graph.

pub mod conv;
pub mod layers;
pub mod optim;

use crate::rng::RngStream;
use ndarray::{Array4, ArrayD, IxDyn};

pub type Tensor4 = Array4<f64>;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// He-normal initialization for a given fan-in.
    pub fn he(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Flatten a list of mutable param references from nested layers.
#[macro_export]
macro_rules! collect_params {
    ($($layer:expr),* $(,)?) => {{
        let mut ps: Vec<&mut $crate::nn::Param> = Vec::new();
        $( ps.extend($layer.params_mut()); )*
        ps
    }};
}

/// Did any parameter or gradient go non-finite (training divergence check).
pub fn any_non_finite(params: &[&mut Param]) -> bool {
    params
        .iter()
        .any(|p| p.value.iter().any(|v| !v.is_finite()))
}

/// Dump named parameters into a checkpoint.
pub fn params_to_checkpoint(
    model_id: &str,
    entries: Vec<(String, &mut Param)>,
) -> crate::checkpoint::Checkpoint {
    let mut ckpt = crate::checkpoint::Checkpoint::new(model_id);
    for (name, p) in entries {
        ckpt.insert(
            &name,
            p.value.shape().to_vec(),
            p.value.iter().cloned().collect(),
        );
    }
    ckpt
}

/// Load named parameters from a checkpoint; keys and shapes must match exactly.
pub fn params_from_checkpoint(
    ckpt: &crate::checkpoint::Checkpoint,
    entries: Vec<(String, &mut Param)>,
) -> crate::error::Result<()> {
    let names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    ckpt.expect_keys(&refs)?;
    for (name, p) in entries {
        let t = ckpt.get(&name)?;
        if t.shape != p.value.shape() {
            return Err(crate::error::BdfwError::BadCheckpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape,
                p.value.shape()
            )));
        }
        p.value.as_slice_mut().unwrap().copy_from_slice(&t.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::conv::{Conv2d, ConvTranspose2d, MaxPool2d};
    use super::layers::{GlobalAvgPool, Linear, Relu, Sigmoid};
    use super::optim::AdamW;
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::Array4;

    /// Tiny composed net used only to finite-difference check backprop.
    struct TinyNet {
        c1: Conv2d,
        r1: Relu,
        p1: MaxPool2d,
        up: ConvTranspose2d,
        sg: Sigmoid,
        gap: GlobalAvgPool,
        fc: Linear,
    }

    impl TinyNet {
        fn new(rng: &mut RngStream) -> Self {
            TinyNet {
                c1: Conv2d::new(2, 3, 3, 1, 1, rng),
                r1: Relu::new(),
                p1: MaxPool2d::new(),
                up: ConvTranspose2d::new(3, 2, rng),
                sg: Sigmoid::new(),
                gap: GlobalAvgPool::new(),
                fc: Linear::new(2, 2, rng),
            }
        }

        /// Scalar objective: 0.5 * sum(fc_out^2).
        fn loss(&mut self, x: &Tensor4, train: bool) -> f64 {
            let h = self.c1.forward(x, train);
            let h = self.r1.forward(&h, train);
            let h = self.p1.forward(&h, train);
            let h = self.up.forward(&h, train);
            let h = self.sg.forward(&h, train);
            let pooled = self.gap.forward(&h);
            let out = self.fc.forward(&pooled, train);
            0.5 * out.iter().map(|v| v * v).sum::<f64>()
        }

        fn loss_and_backward(&mut self, x: &Tensor4) -> (f64, Tensor4) {
            let h = self.c1.forward(x, true);
            let h = self.r1.forward(&h, true);
            let h = self.p1.forward(&h, true);
            let h = self.up.forward(&h, true);
            let h = self.sg.forward(&h, true);
            let pooled = self.gap.forward(&h);
            let out = self.fc.forward(&pooled, true);
            let loss = 0.5 * out.iter().map(|v| v * v).sum::<f64>();
            let dout = out.clone();
            let dpooled = self.fc.backward(&dout);
            let dh = self.gap.backward(&dpooled);
            let dh = self.sg.backward(&dh);
            let dh = self.up.backward(&dh);
            let dh = self.p1.backward(&dh);
            let dh = self.r1.backward(&dh);
            let dx = self.c1.backward(&dh);
            (loss, dx)
        }

        fn params_mut(&mut self) -> Vec<&mut Param> {
            collect_params!(self.c1, self.up, self.fc)
        }
    }

    fn random_input(rng: &mut RngStream) -> Tensor4 {
        let mut x = Array4::zeros((2, 2, 4, 4));
        for v in x.iter_mut() {
            // keep away from ReLU kinks and pool ties
            *v = rng.normal() * 0.7 + 0.05;
        }
        x
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = seeded_rng(101, "fd");
        let mut net = TinyNet::new(&mut rng);
        let x = random_input(&mut rng);
        for p in net.params_mut() {
            p.zero_grad();
        }
        let (_, dx) = net.loss_and_backward(&x);
        let h = 1e-5;

        // input gradient
        let mut x_pert = x.clone();
        for &idx in &[(0usize, 0usize, 1usize, 2usize), (1, 1, 3, 0)] {
            let orig = x_pert[[idx.0, idx.1, idx.2, idx.3]];
            x_pert[[idx.0, idx.1, idx.2, idx.3]] = orig + h;
            let lp = net.loss(&x_pert, false);
            x_pert[[idx.0, idx.1, idx.2, idx.3]] = orig - h;
            let lm = net.loss(&x_pert, false);
            x_pert[[idx.0, idx.1, idx.2, idx.3]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx[[idx.0, idx.1, idx.2, idx.3]];
            assert!(
                (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                "input grad mismatch: fd {fd} vs {an}"
            );
        }

        // every 7th parameter element of every param tensor
        let n_params = net.params_mut().len();
        for pi in 0..n_params {
            let n_el = net.params_mut()[pi].value.len();
            for ei in (0..n_el).step_by(7) {
                let analytic = net.params_mut()[pi].grad.as_slice().unwrap()[ei];
                {
                    let p = &mut net.params_mut()[pi];
                    p.value.as_slice_mut().unwrap()[ei] += h;
                }
                let lp = net.loss(&x, false);
                {
                    let p = &mut net.params_mut()[pi];
                    p.value.as_slice_mut().unwrap()[ei] -= 2.0 * h;
                }
                let lm = net.loss(&x, false);
                {
                    let p = &mut net.params_mut()[pi];
                    p.value.as_slice_mut().unwrap()[ei] += h;
                }
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {pi} elem {ei}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn adamw_reduces_simple_objective() {
        let mut rng = seeded_rng(102, "adamw");
        let mut net = TinyNet::new(&mut rng);
        let x = random_input(&mut rng);
        let mut opt = AdamW::new(1e-2, 0.0);
        let first = net.loss(&x, false);
        let mut last = first;
        for _ in 0..50 {
            AdamW::zero_grad(&mut net.params_mut());
            let (loss, _) = net.loss_and_backward(&x);
            opt.step(&mut net.params_mut());
            last = loss;
        }
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }
}

//! Stage I inpainter: restores the masked trigger region from context,
//! plus the composition that splices the restoration into the image.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{build_stage1_pairs, Dataset};
use crate::error::{BdfwError, Result};
use crate::nn::conv::{stack_images, Conv2d, ConvTranspose2d};
use crate::nn::layers::{Relu, Sigmoid};
use crate::nn::optim::AdamW;
use crate::nn::{params_from_checkpoint, params_to_checkpoint, Param, Tensor4};
use crate::rng::RngStream;
use crate::tensor::{BinaryMask, ImageTensor};
use ndarray::{s, Array3};
use std::path::Path;

const MASK_EPS: f64 = 1e-6;

/// L1 distance restricted to the masked region, normalized by mask area.
/// `hvt_mask` marks the region to restore (1 = trigger pixels).
pub fn masked_l1_loss(rec: &ImageTensor, clean: &ImageTensor, hvt_mask: &BinaryMask) -> f64 {
    let (c, h, w) = rec.shape();
    let mut num = 0.0;
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                num += (rec.data[[ci, i, j]] - clean.data[[ci, i, j]]).abs()
                    * hvt_mask.data[[i, j]];
            }
        }
    }
    num / (hvt_mask.sum() + MASK_EPS)
}

/// Encoder–decoder restoration net over a 4-channel (image ⊕ mask) input.
pub struct InpainterNet {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
    r2: Relu,
    c3: Conv2d,
    r3: Relu,
    u1: ConvTranspose2d,
    ru1: Relu,
    u2: ConvTranspose2d,
    ru2: Relu,
    out: Conv2d,
    sg: Sigmoid,
    width: usize,
}

impl InpainterNet {
    pub fn new(width: usize, rng: &mut RngStream) -> Self {
        let w = width;
        InpainterNet {
            c1: Conv2d::new(4, w, 3, 1, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(w, 2 * w, 3, 2, 1, rng),
            r2: Relu::new(),
            c3: Conv2d::new(2 * w, 2 * w, 3, 2, 1, rng),
            r3: Relu::new(),
            u1: ConvTranspose2d::new(2 * w, 2 * w, rng),
            ru1: Relu::new(),
            u2: ConvTranspose2d::new(2 * w, w, rng),
            ru2: Relu::new(),
            out: Conv2d::new(w, 3, 3, 1, 1, rng),
            sg: Sigmoid::new(),
            width: w,
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let h = self.r1.forward(&self.c1.forward(x, train), train);
        let h = self.r2.forward(&self.c2.forward(&h, train), train);
        let h = self.r3.forward(&self.c3.forward(&h, train), train);
        let h = self.ru1.forward(&self.u1.forward(&h, train), train);
        let h = self.ru2.forward(&self.u2.forward(&h, train), train);
        let h = self.out.forward(&h, train);
        self.sg.forward(&h, train)
    }

    fn backward(&mut self, dy: &Tensor4) {
        let dh = self.sg.backward(dy);
        let dh = self.out.backward(&dh);
        let dh = self.ru2.backward(&dh);
        let dh = self.u2.backward(&dh);
        let dh = self.ru1.backward(&dh);
        let dh = self.u1.backward(&dh);
        let dh = self.r3.backward(&dh);
        let dh = self.c3.backward(&dh);
        let dh = self.r2.backward(&dh);
        let dh = self.c2.backward(&dh);
        let dh = self.r1.backward(&dh);
        self.c1.backward(&dh);
    }

    fn param_entries(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("inpainter.c1.w".into(), &mut self.c1.w),
            ("inpainter.c1.b".into(), &mut self.c1.b),
            ("inpainter.c2.w".into(), &mut self.c2.w),
            ("inpainter.c2.b".into(), &mut self.c2.b),
            ("inpainter.c3.w".into(), &mut self.c3.w),
            ("inpainter.c3.b".into(), &mut self.c3.b),
            ("inpainter.u1.w".into(), &mut self.u1.w),
            ("inpainter.u1.b".into(), &mut self.u1.b),
            ("inpainter.u2.w".into(), &mut self.u2.w),
            ("inpainter.u2.b".into(), &mut self.u2.b),
            ("inpainter.out.w".into(), &mut self.out.w),
            ("inpainter.out.b".into(), &mut self.out.b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.param_entries().into_iter().map(|(_, p)| p).collect()
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let width = self.width;
        let mut ckpt = params_to_checkpoint("inpainter", self.param_entries());
        ckpt.metadata.insert("width".into(), width.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<InpainterNet> {
        let width: usize = ckpt
            .metadata
            .get("width")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| BdfwError::BadCheckpoint("missing metadata 'width'".into()))?;
        let mut rng = RngStream::new(0, "inpainter-load-placeholder");
        let mut net = InpainterNet::new(width, &mut rng);
        params_from_checkpoint(ckpt, net.param_entries())?;
        Ok(net)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<InpainterNet> {
        InpainterNet::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Full-image restoration given the trigger mask (1 = restore here).
    pub fn inpaint(&mut self, x: &ImageTensor, hvt_mask: &BinaryMask) -> ImageTensor {
        let input = concat_mask_channel(&x.data, hvt_mask);
        let batch = stack_images(std::slice::from_ref(&input));
        let y = self.forward(&batch, false);
        ImageTensor {
            data: y.slice(s![0, .., .., ..]).to_owned(),
        }
    }
}

/// Append the mask as a fourth channel.
fn concat_mask_channel(img: &Array3<f64>, mask: &BinaryMask) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c + 1, h, w));
    out.slice_mut(s![..c, .., ..]).assign(img);
    out.slice_mut(s![c, .., ..]).assign(&mask.data);
    out
}

/// Splice: keep clean pixels verbatim, take the restoration elsewhere.
pub fn compose_stage1(
    x: &ImageTensor,
    clean_mask: &BinaryMask,
    net: &mut InpainterNet,
) -> Result<ImageTensor> {
    let (c, h, w) = x.shape();
    if clean_mask.height() != h || clean_mask.width() != w {
        return Err(BdfwError::ShapeMismatch {
            expected: format!("mask {h}x{w}"),
            got: format!("{}x{}", clean_mask.height(), clean_mask.width()),
        });
    }
    if !clean_mask.is_hard() {
        return Err(BdfwError::InvalidParam(
            "compose_stage1 needs a hard binary mask".into(),
        ));
    }
    let rec = net.inpaint(x, &clean_mask.complement());
    let mut out = ImageTensor::zeros(c, h, w);
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                // per-pixel select keeps the clean region bit-exact
                out.data[[ci, i, j]] = if clean_mask.data[[i, j]] == 1.0 {
                    x.data[[ci, i, j]]
                } else {
                    rec.data[[ci, i, j]]
                };
            }
        }
    }
    Ok(out)
}

/// Train the inpainter on per-epoch regenerated surrogate pairs, feeding
/// ground-truth trigger masks and minimizing masked L1 to the clean source.
pub fn train_inpainter(
    clean: &Dataset,
    cfg: &crate::locator::SurrogateTrainConfig,
    width: usize,
    rng: &mut RngStream,
) -> Result<InpainterNet> {
    if clean.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let mut init_rng = rng.fork("init");
    let mut net = InpainterNet::new(width, &mut init_rng);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let pairs = build_stage1_pairs(clean, &rng.fork(&format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.fork(&format!("order{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| {
                    concat_mask_channel(
                        &pairs[i].patched.data,
                        &pairs[i].clean_mask.complement(),
                    )
                })
                .collect();
            let x = stack_images(&inputs);
            let rec = net.forward(&x, true);
            // batch-mean masked L1 and its gradient w.r.t. the restoration
            let mut loss = 0.0;
            let mut drec = Tensor4::zeros(rec.dim());
            let bn = chunk.len() as f64;
            for (bi, &i) in chunk.iter().enumerate() {
                let hvt = pairs[i].clean_mask.complement();
                let denom = hvt.sum() + MASK_EPS;
                let clean_img = &pairs[i].clean_original.data;
                let (c, hh, ww) = clean_img.dim();
                let mut num = 0.0;
                for ci in 0..c {
                    for ii in 0..hh {
                        for jj in 0..ww {
                            let m = hvt.data[[ii, jj]];
                            if m == 0.0 {
                                continue;
                            }
                            let diff = rec[[bi, ci, ii, jj]] - clean_img[[ci, ii, jj]];
                            num += diff.abs() * m;
                            drec[[bi, ci, ii, jj]] = diff.signum() * m / (denom * bn);
                        }
                    }
                }
                loss += num / denom;
            }
            loss /= bn;
            if !loss.is_finite() {
                return Err(BdfwError::Diverged(format!(
                    "inpainter loss became non-finite at epoch {epoch}"
                )));
            }
            AdamW::zero_grad(&mut net.params_mut());
            net.backward(&drec);
            opt.step(&mut net.params_mut());
        }
    }
    Ok(net)
}

/// Mean in-mask absolute error over held-out pairs (uses ground-truth masks).
pub fn inpainter_mae(net: &mut InpainterNet, pairs: &[crate::data::Stage1Pair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let hvt = p.clean_mask.complement();
        let rec = net.inpaint(&p.patched, &hvt);
        // average per masked pixel and channel
        let (c, _, _) = rec.shape();
        total += masked_l1_loss(&rec, &p.clean_original, &hvt) / c as f64;
    }
    total / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn masked_l1_identities() {
        let a = ImageTensor::filled(3, 4, 4, 0.3);
        let mut mask = BinaryMask::zeros(4, 4);
        mask.data[[1, 2]] = 1.0;
        // rec == clean everywhere -> 0
        assert_eq!(masked_l1_loss(&a, &a, &mask), 0.0);
        // rec differs only outside the mask -> 0
        let mut outside = a.clone();
        outside.data[[0, 3, 3]] = 0.9;
        assert_eq!(masked_l1_loss(&outside, &a, &mask), 0.0);
        // single masked pixel off by 0.5, mask area 1 -> ~0.5
        let mut inside = a.clone();
        inside.data[[0, 1, 2]] += 0.5;
        let loss = masked_l1_loss(&inside, &a, &mask);
        assert!((loss - 0.5).abs() < 1e-5, "loss {loss}");
        // zero-area mask -> ~0 via the epsilon guard
        let empty = BinaryMask::zeros(4, 4);
        assert!(masked_l1_loss(&inside, &a, &empty).abs() < 1e-3);
    }

    #[test]
    fn masked_l1_matches_scalar_loop_oracle() {
        let mut rng = seeded_rng(31, "l1-oracle");
        for _ in 0..10 {
            let mut rec = ImageTensor::zeros(3, 4, 4);
            let mut clean = ImageTensor::zeros(3, 4, 4);
            let mut mask = BinaryMask::zeros(4, 4);
            for v in rec.data.iter_mut() {
                *v = rng.uniform();
            }
            for v in clean.data.iter_mut() {
                *v = rng.uniform();
            }
            for v in mask.data.iter_mut() {
                *v = if rng.uniform() < 0.4 { 1.0 } else { 0.0 };
            }
            let mut num = 0.0;
            let mut area = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    area += mask.data[[i, j]];
                    for c in 0..3 {
                        num += (rec.data[[c, i, j]] - clean.data[[c, i, j]]).abs()
                            * mask.data[[i, j]];
                    }
                }
            }
            let want = num / (area + 1e-6);
            assert!((masked_l1_loss(&rec, &clean, &mask) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_preserves_clean_pixels_bit_exactly() {
        let mut rng = seeded_rng(32, "compose");
        let mut net = InpainterNet::new(4, &mut rng);
        let mut x = ImageTensor::zeros(3, 16, 16);
        for v in x.data.iter_mut() {
            *v = rng.uniform();
        }
        let mut mask = BinaryMask::zeros(16, 16);
        for v in mask.data.iter_mut() {
            *v = if rng.uniform() < 0.8 { 1.0 } else { 0.0 };
        }
        let out = compose_stage1(&x, &mask, &mut net).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                for j in 0..16 {
                    if mask.data[[i, j]] == 1.0 {
                        assert_eq!(out.data[[c, i, j]], x.data[[c, i, j]]);
                    }
                }
            }
        }
        // all-ones mask -> identity, bit-exact
        let ones = BinaryMask::zeros(16, 16).complement();
        let id = compose_stage1(&x, &ones, &mut net).unwrap();
        assert_eq!(id.data, x.data);
        // all-zeros mask -> the net's full restoration
        let zeros = BinaryMask::zeros(16, 16);
        let full = compose_stage1(&x, &zeros, &mut net).unwrap();
        let rec = net.inpaint(&x, &ones);
        assert_eq!(full.data, rec.data);
    }

    #[test]
    fn compose_rejects_soft_or_misshapen_masks() {
        let mut rng = seeded_rng(33, "compose-err");
        let mut net = InpainterNet::new(4, &mut rng);
        let x = ImageTensor::filled(3, 16, 16, 0.5);
        let mut soft = BinaryMask::zeros(16, 16);
        soft.data[[0, 0]] = 0.5;
        assert!(compose_stage1(&x, &soft, &mut net).is_err());
        let wrong = BinaryMask::zeros(8, 8);
        assert!(compose_stage1(&x, &wrong, &mut net).is_err());
    }

    #[test]
    fn inpainter_output_in_unit_range_and_shape() {
        let mut rng = seeded_rng(34, "range");
        let mut net = InpainterNet::new(4, &mut rng);
        let x = ImageTensor::filled(3, 16, 16, 0.7);
        let mask = BinaryMask::zeros(16, 16).complement();
        let rec = net.inpaint(&x, &mask);
        assert_eq!(rec.shape(), (3, 16, 16));
        assert!(rec.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded_rng(35, "ckpt");
        let mut net = InpainterNet::new(4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inp.ckpt");
        net.save(&path).unwrap();
        let mut back = InpainterNet::load(&path).unwrap();
        let x = ImageTensor::filled(3, 16, 16, 0.3);
        let mask = BinaryMask::zeros(16, 16).complement();
        assert_eq!(net.inpaint(&x, &mask).data, back.inpaint(&x, &mask).data);
    }

    #[test]
    fn short_training_reduces_in_mask_error() {
        use crate::data::make_shapes_dataset;
        let ds = make_shapes_dataset(48, 4, 40).unwrap();
        let holdout = make_shapes_dataset(12, 4, 41).unwrap();
        let held_pairs = build_stage1_pairs(&holdout, &seeded_rng(42, "held"));
        let cfg = crate::locator::SurrogateTrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.0,
        };
        let rng0 = seeded_rng(43, "untrained");
        let mut fresh = InpainterNet::new(6, &mut rng0.fork("init"));
        let base = inpainter_mae(&mut fresh, &held_pairs);
        let mut rng = seeded_rng(43, "train");
        let mut net = train_inpainter(&ds, &cfg, 6, &mut rng).unwrap();
        let trained = inpainter_mae(&mut net, &held_pairs);
        assert!(
            trained < base,
            "training did not help: {trained} vs baseline {base}"
        );
    }
}

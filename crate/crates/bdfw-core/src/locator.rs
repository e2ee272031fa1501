//! Stage I locator: a segmentation network that marks clean pixels (1)
//! versus conspicuous-trigger pixels (0), trained on surrogate patches.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{build_stage1_pairs, Dataset, Stage1Pair};
use crate::error::{BdfwError, Result};
use crate::nn::conv::{concat_channels, split_channels, Conv2d, ConvTranspose2d, MaxPool2d};
use crate::nn::layers::{sigmoid_scalar, Relu};
use crate::nn::optim::AdamW;
use crate::nn::{params_from_checkpoint, params_to_checkpoint, Param, Tensor4};
use crate::rng::RngStream;
use crate::tensor::{BinaryMask, ImageTensor};
use ndarray::{s, Array2};
use std::path::Path;

/// Weights for the combined segmentation loss.
#[derive(Debug, Clone, Copy)]
pub struct LocatorLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LocatorLossWeights {
    fn default() -> Self {
        LocatorLossWeights {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LocatorLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(BdfwError::InvalidParam(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-7;

/// Pixel-summed binary cross entropy between a soft mask and a hard target.
pub fn bce_loss(pred: &Array2<f64>, target: &BinaryMask) -> Result<f64> {
    if pred.dim() != target.data.dim() {
        return Err(BdfwError::ShapeMismatch {
            expected: format!("{:?}", target.data.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let mut loss = 0.0;
    for (&y, &m) in pred.iter().zip(target.data.iter()) {
        let y = y.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= m * y.ln() + (1.0 - m) * (1.0 - y).ln();
    }
    Ok(loss)
}

/// Dice loss 1 − 2Σmy/(Σm+Σy); the empty-vs-empty case is defined as 0.
pub fn dice_loss(pred: &Array2<f64>, target: &BinaryMask) -> f64 {
    let inter: f64 = pred
        .iter()
        .zip(target.data.iter())
        .map(|(&y, &m)| m * y)
        .sum();
    let denom = pred.sum() + target.data.sum();
    if denom == 0.0 {
        return 0.0;
    }
    1.0 - 2.0 * inter / denom
}

/// Mean over the batch of α·BCE + β·Dice.
pub fn locator_total_loss(
    preds: &[Array2<f64>],
    targets: &[BinaryMask],
    weights: LocatorLossWeights,
) -> Result<f64> {
    weights.validate()?;
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(BdfwError::EmptySet);
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += weights.alpha * bce_loss(p, t)? + weights.beta * dice_loss(p, t);
    }
    Ok(total / preds.len() as f64)
}

/// Loss of `locator_total_loss` on sigmoid(logits) plus its gradient with
/// respect to the logits. Logits come in as (N,1,H,W).
pub fn locator_loss_and_grad(
    logits: &Tensor4,
    targets: &[BinaryMask],
    weights: LocatorLossWeights,
) -> Result<(f64, Tensor4)> {
    weights.validate()?;
    let (n, _, h, w) = logits.dim();
    if n == 0 || n != targets.len() {
        return Err(BdfwError::EmptySet);
    }
    let mut preds = Vec::with_capacity(n);
    for ni in 0..n {
        preds.push(logits.slice(s![ni, 0, .., ..]).mapv(sigmoid_scalar));
    }
    let loss = locator_total_loss(&preds, targets, weights)?;
    let mut grad = Tensor4::zeros(logits.dim());
    let scale = 1.0 / n as f64;
    for ni in 0..n {
        let y = &preds[ni];
        let m = &targets[ni].data;
        let inter: f64 = y.iter().zip(m.iter()).map(|(&a, &b)| a * b).sum();
        let denom = y.sum() + m.sum();
        for i in 0..h {
            for j in 0..w {
                let yv = y[[i, j]];
                let mv = m[[i, j]];
                // BCE term through the sigmoid: d/dz = y − m (clamped region
                // has zero slope only at the flooring bound, ignored here)
                let mut d = weights.alpha * (yv - mv);
                if denom > 0.0 {
                    let ddice_dy = -(2.0 * mv * denom - 2.0 * inter) / (denom * denom);
                    d += weights.beta * ddice_dy * yv * (1.0 - yv);
                }
                grad[[ni, 0, i, j]] = scale * d;
            }
        }
    }
    Ok((loss, grad))
}

/// Plain residual block used by the calibration head.
struct CalBlock {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
}

impl CalBlock {
    fn new(ch: usize, rng: &mut RngStream) -> Self {
        CalBlock {
            c1: Conv2d::new(ch, ch, 3, 1, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(ch, ch, 3, 1, 1, rng),
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let h = self.c1.forward(x, train);
        let h = self.r1.forward(&h, train);
        self.c2.forward(&h, train) + x
    }

    fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let dh = self.c2.backward(dy);
        let dh = self.r1.backward(&dh);
        self.c1.backward(&dh) + dy
    }
}

/// Encoder–decoder segmentation net with a skip-calibrated head.
pub struct LocatorNet {
    e1: Conv2d,
    re1: Relu,
    e2: Conv2d,
    re2: Relu,
    p1: MaxPool2d,
    e3: Conv2d,
    re3: Relu,
    p2: MaxPool2d,
    e4: Conv2d,
    re4: Relu,
    u1: ConvTranspose2d,
    ru1: Relu,
    d1: Conv2d,
    rd1: Relu,
    u2: ConvTranspose2d,
    ru2: Relu,
    d2: Conv2d,
    rd2: Relu,
    merge: Conv2d,
    rm: Relu,
    cal1: CalBlock,
    cal2: CalBlock,
    head: Conv2d,
    skip_cache: Option<Tensor4>,
    width: usize,
}

impl LocatorNet {
    pub fn new(width: usize, rng: &mut RngStream) -> Self {
        let w = width;
        LocatorNet {
            e1: Conv2d::new(3, w, 3, 1, 1, rng),
            re1: Relu::new(),
            e2: Conv2d::new(w, w, 3, 1, 1, rng),
            re2: Relu::new(),
            p1: MaxPool2d::new(),
            e3: Conv2d::new(w, 2 * w, 3, 1, 1, rng),
            re3: Relu::new(),
            p2: MaxPool2d::new(),
            e4: Conv2d::new(2 * w, 2 * w, 3, 1, 1, rng),
            re4: Relu::new(),
            u1: ConvTranspose2d::new(2 * w, 2 * w, rng),
            ru1: Relu::new(),
            d1: Conv2d::new(2 * w, w, 3, 1, 1, rng),
            rd1: Relu::new(),
            u2: ConvTranspose2d::new(w, w, rng),
            ru2: Relu::new(),
            d2: Conv2d::new(w, w, 3, 1, 1, rng),
            rd2: Relu::new(),
            merge: Conv2d::new(2 * w, w, 1, 1, 0, rng),
            rm: Relu::new(),
            cal1: CalBlock::new(w, rng),
            cal2: CalBlock::new(w, rng),
            head: Conv2d::new(w, 1, 1, 1, 0, rng),
            skip_cache: None,
            width: w,
        }
    }

    /// Raw logits, shape (N,1,H,W).
    pub fn forward_logits(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let h = self.e1.forward(x, train);
        let h = self.re1.forward(&h, train);
        let h = self.e2.forward(&h, train);
        let skip = self.re2.forward(&h, train);
        let h = self.p1.forward(&skip, train);
        let h = self.e3.forward(&h, train);
        let h = self.re3.forward(&h, train);
        let h = self.p2.forward(&h, train);
        let h = self.e4.forward(&h, train);
        let h = self.re4.forward(&h, train);
        let h = self.u1.forward(&h, train);
        let h = self.ru1.forward(&h, train);
        let h = self.d1.forward(&h, train);
        let h = self.rd1.forward(&h, train);
        let h = self.u2.forward(&h, train);
        let h = self.ru2.forward(&h, train);
        let h = self.d2.forward(&h, train);
        let dec = self.rd2.forward(&h, train);
        let h = concat_channels(&dec, &skip);
        if train {
            self.skip_cache = Some(skip);
        }
        let h = self.merge.forward(&h, train);
        let h = self.rm.forward(&h, train);
        let h = self.cal1.forward(&h, train);
        let h = self.cal2.forward(&h, train);
        self.head.forward(&h, train)
    }

    fn backward(&mut self, dlogits: &Tensor4) {
        let dh = self.head.backward(dlogits);
        let dh = self.cal2.backward(&dh);
        let dh = self.cal1.backward(&dh);
        let dh = self.rm.backward(&dh);
        let dcat = self.merge.backward(&dh);
        let (ddec, dskip_head) = split_channels(&dcat, self.width);
        let dh = self.rd2.backward(&ddec);
        let dh = self.d2.backward(&dh);
        let dh = self.ru2.backward(&dh);
        let dh = self.u2.backward(&dh);
        let dh = self.rd1.backward(&dh);
        let dh = self.d1.backward(&dh);
        let dh = self.ru1.backward(&dh);
        let dh = self.u1.backward(&dh);
        let dh = self.re4.backward(&dh);
        let dh = self.e4.backward(&dh);
        let dh = self.p2.backward(&dh);
        let dh = self.re3.backward(&dh);
        let dh = self.e3.backward(&dh);
        let dskip = self.p1.backward(&dh) + dskip_head;
        self.skip_cache = None;
        let dh = self.re2.backward(&dskip);
        let dh = self.e2.backward(&dh);
        let dh = self.re1.backward(&dh);
        self.e1.backward(&dh);
    }

    fn param_entries(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        out.push(("locator.e1.w".into(), &mut self.e1.w));
        out.push(("locator.e1.b".into(), &mut self.e1.b));
        out.push(("locator.e2.w".into(), &mut self.e2.w));
        out.push(("locator.e2.b".into(), &mut self.e2.b));
        out.push(("locator.e3.w".into(), &mut self.e3.w));
        out.push(("locator.e3.b".into(), &mut self.e3.b));
        out.push(("locator.e4.w".into(), &mut self.e4.w));
        out.push(("locator.e4.b".into(), &mut self.e4.b));
        out.push(("locator.u1.w".into(), &mut self.u1.w));
        out.push(("locator.u1.b".into(), &mut self.u1.b));
        out.push(("locator.d1.w".into(), &mut self.d1.w));
        out.push(("locator.d1.b".into(), &mut self.d1.b));
        out.push(("locator.u2.w".into(), &mut self.u2.w));
        out.push(("locator.u2.b".into(), &mut self.u2.b));
        out.push(("locator.d2.w".into(), &mut self.d2.w));
        out.push(("locator.d2.b".into(), &mut self.d2.b));
        out.push(("locator.merge.w".into(), &mut self.merge.w));
        out.push(("locator.merge.b".into(), &mut self.merge.b));
        out.push(("locator.cal1.c1.w".into(), &mut self.cal1.c1.w));
        out.push(("locator.cal1.c1.b".into(), &mut self.cal1.c1.b));
        out.push(("locator.cal1.c2.w".into(), &mut self.cal1.c2.w));
        out.push(("locator.cal1.c2.b".into(), &mut self.cal1.c2.b));
        out.push(("locator.cal2.c1.w".into(), &mut self.cal2.c1.w));
        out.push(("locator.cal2.c1.b".into(), &mut self.cal2.c1.b));
        out.push(("locator.cal2.c2.w".into(), &mut self.cal2.c2.w));
        out.push(("locator.cal2.c2.b".into(), &mut self.cal2.c2.b));
        out.push(("locator.head.w".into(), &mut self.head.w));
        out.push(("locator.head.b".into(), &mut self.head.b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.param_entries().into_iter().map(|(_, p)| p).collect()
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let width = self.width;
        let mut ckpt = params_to_checkpoint("locator", self.param_entries());
        ckpt.metadata.insert("width".into(), width.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LocatorNet> {
        let width: usize = ckpt
            .metadata
            .get("width")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| BdfwError::BadCheckpoint("missing metadata 'width'".into()))?;
        let mut rng = RngStream::new(0, "locator-load-placeholder");
        let mut net = LocatorNet::new(width, &mut rng);
        params_from_checkpoint(ckpt, net.param_entries())?;
        Ok(net)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<LocatorNet> {
        LocatorNet::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Hard clean-pixel mask (1 = keep) for one image.
pub fn locate(net: &mut LocatorNet, x: &ImageTensor) -> BinaryMask {
    let batch = crate::nn::conv::stack_images(std::slice::from_ref(&x.data));
    let logits = net.forward_logits(&batch, false);
    let probs = logits.slice(s![0, 0, .., ..]).mapv(sigmoid_scalar);
    BinaryMask { data: probs }.binarize()
}

/// Training schedule shared by the Stage I and Stage II networks.
#[derive(Debug, Clone)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// Mean IoU of predicted vs true clean masks over held-out pairs.
pub fn locator_iou(net: &mut LocatorNet, pairs: &[Stage1Pair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let pred = locate(net, &p.patched);
        total += pred.iou(&p.clean_mask);
    }
    total / pairs.len() as f64
}

/// Train the locator on per-epoch regenerated surrogate pairs drawn over
/// the clean dataset. Gate: held-out IoU checked by the caller.
pub fn train_locator(
    clean: &Dataset,
    cfg: &SurrogateTrainConfig,
    weights: LocatorLossWeights,
    width: usize,
    rng: &mut RngStream,
) -> Result<LocatorNet> {
    weights.validate()?;
    if clean.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let mut init_rng = rng.fork("init");
    let mut net = LocatorNet::new(width, &mut init_rng);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let pairs = build_stage1_pairs(clean, &rng.fork(&format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.fork(&format!("order{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<_> = chunk.iter().map(|&i| pairs[i].patched.data.clone()).collect();
            let targets: Vec<_> = chunk.iter().map(|&i| pairs[i].clean_mask.clone()).collect();
            let x = crate::nn::conv::stack_images(&imgs);
            let logits = net.forward_logits(&x, true);
            let (loss, dlogits) = locator_loss_and_grad(&logits, &targets, weights)?;
            if !loss.is_finite() {
                return Err(BdfwError::Diverged(format!(
                    "locator loss became non-finite at epoch {epoch}"
                )));
            }
            AdamW::zero_grad(&mut net.params_mut());
            net.backward(&dlogits);
            opt.step(&mut net.params_mut());
        }
    }
    Ok(net)
}

//! Stage II de-cleaner: reconstructs the blended trigger from a
//! suspicious image by treating the clean content as noise, then purifies
//! by subtraction.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{build_stage2_triplets, Dataset, SurrogateTriplet};
use crate::error::{BdfwError, Result};
use crate::locator::SurrogateTrainConfig;
use crate::nn::conv::{stack_images, Conv2d, ConvTranspose2d, MaxPool2d};
use crate::nn::layers::{GlobalAvgPool, Linear, Relu};
use crate::nn::optim::AdamW;
use crate::nn::{params_from_checkpoint, params_to_checkpoint, Param, Tensor4};
use crate::rng::RngStream;
use crate::tensor::{clamp01, ImageTensor};
use ndarray::{s, Array1, Array2};
use std::path::Path;

/// Loss weights and contrastive temperature.
#[derive(Debug, Clone, Copy)]
pub struct DecleanerLossWeights {
    pub lambda_recon: f64,
    pub lambda_clean: f64,
    pub lambda_contrast: f64,
    pub tau: f64,
}

impl Default for DecleanerLossWeights {
    fn default() -> Self {
        DecleanerLossWeights {
            lambda_recon: 1.0,
            lambda_clean: 1.0,
            lambda_contrast: 0.1,
            tau: 0.5,
        }
    }
}

impl DecleanerLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_recon < 0.0 || self.lambda_clean < 0.0 || self.lambda_contrast < 0.0 {
            return Err(BdfwError::InvalidParam("loss weights must be ≥ 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(BdfwError::InvalidParam("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Frobenius norm of a residual tensor.
pub fn l2_norm(x: &Tensor4) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Two stacked 3×3 convolutions with ReLUs.
struct DoubleConv {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
    r2: Relu,
}

impl DoubleConv {
    fn new(in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        DoubleConv {
            c1: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
            r1: Relu::new(),
            c2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            r2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let h = self.r1.forward(&self.c1.forward(x, train), train);
        self.r2.forward(&self.c2.forward(&h, train), train)
    }

    fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let dh = self.r2.backward(dy);
        let dh = self.c2.backward(&dh);
        let dh = self.r1.backward(&dh);
        self.c1.backward(&dh)
    }
}

/// U-shaped trigger reconstructor with additive skips and a contrastive
/// embedding head off the bottleneck. Output is unconstrained (no sigmoid):
/// reconstructed triggers may exceed [0,1] before the subtraction clamp.
pub struct DecleanerNet {
    dc1: DoubleConv,
    p1: MaxPool2d,
    dc2: DoubleConv,
    p2: MaxPool2d,
    dc3: DoubleConv,
    p3: MaxPool2d,
    bott: DoubleConv,
    u1: ConvTranspose2d,
    ru1: Relu,
    u2: ConvTranspose2d,
    ru2: Relu,
    u3: ConvTranspose2d,
    ru3: Relu,
    out: Conv2d,
    gap: GlobalAvgPool,
    fc: Linear,
    width: usize,
    embed_dim: usize,
    embed_norms: Option<Vec<f64>>,
    embed_vecs: Option<Array2<f64>>,
}

impl DecleanerNet {
    pub fn new(width: usize, embed_dim: usize, rng: &mut RngStream) -> Self {
        let w = width;
        DecleanerNet {
            dc1: DoubleConv::new(3, w, rng),
            p1: MaxPool2d::new(),
            dc2: DoubleConv::new(w, 2 * w, rng),
            p2: MaxPool2d::new(),
            dc3: DoubleConv::new(2 * w, 4 * w, rng),
            p3: MaxPool2d::new(),
            bott: DoubleConv::new(4 * w, 4 * w, rng),
            u1: ConvTranspose2d::new(4 * w, 4 * w, rng),
            ru1: Relu::new(),
            u2: ConvTranspose2d::new(4 * w, 2 * w, rng),
            ru2: Relu::new(),
            u3: ConvTranspose2d::new(2 * w, w, rng),
            ru3: Relu::new(),
            out: Conv2d::new(w, 3, 3, 1, 1, rng),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(4 * w, embed_dim, rng),
            width,
            embed_dim,
            embed_norms: None,
            embed_vecs: None,
        }
    }

    /// Image-to-image pass: reconstructed trigger, same shape as input.
    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let s1 = self.dc1.forward(x, train);
        let h = self.p1.forward(&s1, train);
        let s2 = self.dc2.forward(&h, train);
        let h = self.p2.forward(&s2, train);
        let s3 = self.dc3.forward(&h, train);
        let h = self.p3.forward(&s3, train);
        let b = self.bott.forward(&h, train);
        let h = self.ru1.forward(&(self.u1.forward(&b, train) + &s3), train);
        let h = self.ru2.forward(&(self.u2.forward(&h, train) + &s2), train);
        let h = self.ru3.forward(&(self.u3.forward(&h, train) + &s1), train);
        self.out.forward(&h, train)
    }

    fn backward(&mut self, dy: &Tensor4) {
        let dh = self.out.backward(dy);
        let dh = self.ru3.backward(&dh);
        let ds1_extra = dh.clone();
        let dh = self.u3.backward(&dh);
        let dh = self.ru2.backward(&dh);
        let ds2_extra = dh.clone();
        let dh = self.u2.backward(&dh);
        let dh = self.ru1.backward(&dh);
        let ds3_extra = dh.clone();
        let db = self.u1.backward(&dh);
        let dh = self.bott.backward(&db);
        let ds3 = self.p3.backward(&dh) + ds3_extra;
        let dh = self.dc3.backward(&ds3);
        let ds2 = self.p2.backward(&dh) + ds2_extra;
        let dh = self.dc2.backward(&ds2);
        let ds1 = self.p1.backward(&dh) + ds1_extra;
        self.dc1.backward(&ds1);
    }

    /// Unit-norm embeddings for a batch of images (encoder + bottleneck +
    /// pooling + projection).
    pub fn embed(&mut self, x: &Tensor4, train: bool) -> Array2<f64> {
        let h = self.dc1.forward(x, train);
        let h = self.p1.forward(&h, train);
        let h = self.dc2.forward(&h, train);
        let h = self.p2.forward(&h, train);
        let h = self.dc3.forward(&h, train);
        let h = self.p3.forward(&h, train);
        let b = self.bott.forward(&h, train);
        let pooled = self.gap.forward(&b);
        let z = self.fc.forward(&pooled, train);
        let mut e = z.clone();
        let mut norms = Vec::with_capacity(z.nrows());
        for mut row in e.outer_iter_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        if train {
            self.embed_norms = Some(norms);
            self.embed_vecs = Some(e.clone());
        }
        e
    }

    fn embed_backward(&mut self, de: &Array2<f64>) {
        let norms = self.embed_norms.take().expect("embed(train) before backward");
        let e = self.embed_vecs.take().expect("embed(train) before backward");
        // through the normalization: dz = (de − e(e·de)) / ‖z‖
        let mut dz = de.clone();
        for (i, mut row) in dz.outer_iter_mut().enumerate() {
            let erow = e.row(i);
            let dot: f64 = erow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (rv, &ev) in row.iter_mut().zip(erow.iter()) {
                *rv = (*rv - ev * dot) / norms[i];
            }
        }
        let dpooled = self.fc.backward(&dz);
        let db = self.gap.backward(&dpooled);
        let dh = self.bott.backward(&db);
        let dh = self.p3.backward(&dh);
        let dh = self.dc3.backward(&dh);
        let dh = self.p2.backward(&dh);
        let dh = self.dc2.backward(&dh);
        let dh = self.p1.backward(&dh);
        self.dc1.backward(&dh);
    }

    fn param_entries(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        let blocks: [(&str, &mut DoubleConv); 4] = [
            ("dc1", &mut self.dc1),
            ("dc2", &mut self.dc2),
            ("dc3", &mut self.dc3),
            ("bott", &mut self.bott),
        ];
        for (name, b) in blocks {
            out.push((format!("decleaner.{name}.c1.w"), &mut b.c1.w));
            out.push((format!("decleaner.{name}.c1.b"), &mut b.c1.b));
            out.push((format!("decleaner.{name}.c2.w"), &mut b.c2.w));
            out.push((format!("decleaner.{name}.c2.b"), &mut b.c2.b));
        }
        out.push(("decleaner.u1.w".into(), &mut self.u1.w));
        out.push(("decleaner.u1.b".into(), &mut self.u1.b));
        out.push(("decleaner.u2.w".into(), &mut self.u2.w));
        out.push(("decleaner.u2.b".into(), &mut self.u2.b));
        out.push(("decleaner.u3.w".into(), &mut self.u3.w));
        out.push(("decleaner.u3.b".into(), &mut self.u3.b));
        out.push(("decleaner.out.w".into(), &mut self.out.w));
        out.push(("decleaner.out.b".into(), &mut self.out.b));
        out.push(("decleaner.fc.w".into(), &mut self.fc.w));
        out.push(("decleaner.fc.b".into(), &mut self.fc.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.param_entries().into_iter().map(|(_, p)| p).collect()
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let (width, embed_dim) = (self.width, self.embed_dim);
        let mut ckpt = params_to_checkpoint("decleaner", self.param_entries());
        ckpt.metadata.insert("width".into(), width.to_string());
        ckpt.metadata
            .insert("embed_dim".into(), embed_dim.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DecleanerNet> {
        let meta = |key: &str| -> Result<usize> {
            ckpt.metadata
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| BdfwError::BadCheckpoint(format!("missing metadata '{key}'")))
        };
        let (width, embed_dim) = (meta("width")?, meta("embed_dim")?);
        let mut rng = RngStream::new(0, "decleaner-load-placeholder");
        let mut net = DecleanerNet::new(width, embed_dim, &mut rng);
        params_from_checkpoint(ckpt, net.param_entries())?;
        Ok(net)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<DecleanerNet> {
        DecleanerNet::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Reconstructed trigger for a single image.
    pub fn reconstruct(&mut self, x: &ImageTensor) -> ImageTensor {
        let batch = stack_images(std::slice::from_ref(&x.data));
        let y = self.forward(&batch, false);
        ImageTensor {
            data: y.slice(s![0, .., .., ..]).to_owned(),
        }
    }
}

/// ‖Δ″ − f″(x_SVT)‖₂² for one triplet. The target Δ″ is the additive
/// residual `blended − clean`, so that subtracting the reconstruction
/// from a blended image recovers the clean one exactly. The norm is
/// squared: the plain norm has a constant-magnitude gradient that lets a
/// zero-output network sit on a plateau for hundreds of steps, while the
/// squared form pulls proportionally to the error.
pub fn recon_loss(net: &mut DecleanerNet, t: &SurrogateTriplet) -> f64 {
    let out = net.forward(&stack_images(std::slice::from_ref(&t.blended.data)), false);
    let residual = &t.blended.data - &t.clean.data;
    let target = stack_images(std::slice::from_ref(&residual));
    let n = l2_norm(&(out - target));
    n * n
}

/// ‖f″(x_cln)‖₂²: the clean image should map to a zero tensor.
pub fn clean_loss(net: &mut DecleanerNet, x_cln: &ImageTensor) -> f64 {
    let out = net.forward(&stack_images(std::slice::from_ref(&x_cln.data)), false);
    let n = l2_norm(&out);
    n * n
}

/// −log[exp(s·t/τ) / (exp(s·t/τ) + exp(s·c/τ))] on unit-norm embeddings.
pub fn contrastive_loss(
    emb_svt: &Array1<f64>,
    emb_trigger: &Array1<f64>,
    emb_clean: &Array1<f64>,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(BdfwError::InvalidParam("temperature must be > 0".into()));
    }
    let st: f64 = emb_svt.dot(emb_trigger);
    let sc: f64 = emb_svt.dot(emb_clean);
    // softplus form of −log softmax, numerically stable
    Ok(((sc - st) / tau).exp().ln_1p())
}

/// Mean over the batch of λ1·recon + λ2·clean + λ3·contrastive.
pub fn decleaner_total_loss(
    net: &mut DecleanerNet,
    batch: &[SurrogateTriplet],
    weights: DecleanerLossWeights,
) -> Result<f64> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let mut total = 0.0;
    for t in batch {
        let mut sample = 0.0;
        if weights.lambda_recon > 0.0 {
            sample += weights.lambda_recon * recon_loss(net, t);
        }
        if weights.lambda_clean > 0.0 {
            sample += weights.lambda_clean * clean_loss(net, &t.clean);
        }
        if weights.lambda_contrast > 0.0 {
            let imgs = vec![t.blended.data.clone(), t.trigger.data.clone(), t.clean.data.clone()];
            let e = net.embed(&stack_images(&imgs), false);
            sample += weights.lambda_contrast
                * contrastive_loss(
                    &e.row(0).to_owned(),
                    &e.row(1).to_owned(),
                    &e.row(2).to_owned(),
                    weights.tau,
                )?;
        }
        total += sample;
    }
    Ok(total / batch.len() as f64)
}

/// One training step's loss with gradients accumulated into the net.
/// Caller zeroes grads before and steps the optimizer after.
pub fn batch_loss_backward(
    net: &mut DecleanerNet,
    batch: &[SurrogateTriplet],
    weights: DecleanerLossWeights,
) -> Result<f64> {
    let bn = batch.len() as f64;
    let mut total = 0.0;
    // reconstruction pass over the blended members
    if weights.lambda_recon > 0.0 {
        let imgs: Vec<_> = batch.iter().map(|t| t.blended.data.clone()).collect();
        let x = stack_images(&imgs);
        let out = net.forward(&x, true);
        let mut dout = Tensor4::zeros(out.dim());
        for (i, t) in batch.iter().enumerate() {
            let residual = &t.blended.data - &t.clean.data;
            let res = out.slice(s![i, .., .., ..]).to_owned() - &residual;
            let sq = res.iter().map(|v| v * v).sum::<f64>();
            total += weights.lambda_recon * sq / bn;
            let scale = 2.0 * weights.lambda_recon / bn;
            dout.slice_mut(s![i, .., .., ..]).assign(&res.mapv(|v| v * scale));
        }
        net.backward(&dout);
    }
    // clean-zero pass over the clean members
    if weights.lambda_clean > 0.0 {
        let imgs: Vec<_> = batch.iter().map(|t| t.clean.data.clone()).collect();
        let x = stack_images(&imgs);
        let out = net.forward(&x, true);
        let mut dout = Tensor4::zeros(out.dim());
        for i in 0..batch.len() {
            let o = out.slice(s![i, .., .., ..]).to_owned();
            let sq = o.iter().map(|v| v * v).sum::<f64>();
            total += weights.lambda_clean * sq / bn;
            let scale = 2.0 * weights.lambda_clean / bn;
            dout.slice_mut(s![i, .., .., ..]).assign(&o.mapv(|v| v * scale));
        }
        net.backward(&dout);
    }
    // contrastive pass on stacked (svt, trigger, clean) embeddings
    if weights.lambda_contrast > 0.0 {
        let mut imgs = Vec::with_capacity(batch.len() * 3);
        for t in batch {
            imgs.push(t.blended.data.clone());
            imgs.push(t.trigger.data.clone());
            imgs.push(t.clean.data.clone());
        }
        let x = stack_images(&imgs);
        let e = net.embed(&x, true);
        let mut de = Array2::zeros(e.dim());
        for i in 0..batch.len() {
            let s_row = e.row(3 * i).to_owned();
            let t_row = e.row(3 * i + 1).to_owned();
            let c_row = e.row(3 * i + 2).to_owned();
            total += weights.lambda_contrast
                * contrastive_loss(&s_row, &t_row, &c_row, weights.tau)?
                / bn;
            let st = s_row.dot(&t_row);
            let sc = s_row.dot(&c_row);
            let p = 1.0 / (1.0 + ((st - sc) / weights.tau).exp()); // σ((sc−st)/τ)
            let k = weights.lambda_contrast * p / (weights.tau * bn);
            for d in 0..e.ncols() {
                de[[3 * i, d]] += k * (c_row[d] - t_row[d]);
                de[[3 * i + 1, d]] += -k * s_row[d];
                de[[3 * i + 2, d]] += k * s_row[d];
            }
        }
        net.embed_backward(&de);
    }
    Ok(total)
}

/// x − f″(x), clamped to [0,1].
pub fn purify_stage2(net: &mut DecleanerNet, x: &ImageTensor) -> Result<ImageTensor> {
    let trigger = net.reconstruct(x);
    clamp01(&ImageTensor {
        data: &x.data - &trigger.data,
    })
}

/// Train the de-cleaner on per-epoch regenerated surrogate triplets.
pub fn train_decleaner(
    clean: &Dataset,
    cfg: &SurrogateTrainConfig,
    weights: DecleanerLossWeights,
    width: usize,
    rng: &mut RngStream,
) -> Result<DecleanerNet> {
    weights.validate()?;
    if clean.records.is_empty() {
        return Err(BdfwError::EmptySet);
    }
    let mut init_rng = rng.fork("init");
    let mut net = DecleanerNet::new(width, 16, &mut init_rng);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let triplets = build_stage2_triplets(clean, &rng.fork(&format!("epoch{epoch}")));
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        rng.fork(&format!("order{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SurrogateTriplet> =
                chunk.iter().map(|&i| triplets[i].clone()).collect();
            AdamW::zero_grad(&mut net.params_mut());
            let loss = batch_loss_backward(&mut net, &batch, weights)?;
            if !loss.is_finite() {
                return Err(BdfwError::Diverged(format!(
                    "de-cleaner loss became non-finite at epoch {epoch}"
                )));
            }
            opt.step(&mut net.params_mut());
        }
    }
    Ok(net)
}

/// Held-out gates: (mean relative trigger residual, mean per-pixel clean
/// output magnitude).
pub fn decleaner_gates(net: &mut DecleanerNet, held: &[SurrogateTriplet]) -> (f64, f64) {
    let mut rel = 0.0;
    let mut clean_pp = 0.0;
    for t in held {
        let rec = net.reconstruct(&t.blended);
        let target = &t.blended.data - &t.clean.data;
        let resid = (&rec.data - &target).mapv(|v| v * v).sum().sqrt();
        let tnorm = target.mapv(|v| v * v).sum().sqrt().max(1e-12);
        rel += resid / tnorm;
        let co = net.reconstruct(&t.clean);
        let n = co.data.len() as f64;
        clean_pp += co.data.iter().map(|v| v.abs()).sum::<f64>() / n;
    }
    (rel / held.len() as f64, clean_pp / held.len() as f64)
}

//! One-squeeze multi-excitation attention.
//!
//! A small conv/relu/pool backbone produces one feature map `U`. A single
//! squeeze (spatial mean) feeds P independent excitation branches; each
//! branch gates the channels of `U` with its own sigmoid mask, and projects
//! the re-weighted map to a feature vector. A linear classifier reads the
//! concatenated branch features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{concat, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, OsmeError>;

#[derive(Debug, Error)]
pub enum OsmeError {
    #[error("branch {branch} out of range for {branches} branches")]
    BranchOutOfRange { branch: usize, branches: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One backbone stage: a stride-1 same-padded convolution, relu, and an
/// optional 2x2 max-pool.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct OsmeConfig {
    /// Attention branch count P.
    pub branches: usize,
    /// Channel count C of the backbone output.
    pub channels: usize,
    /// Excitation bottleneck ratio r; hidden width is C/r.
    pub reduction: usize,
    /// Branch feature dimension D.
    pub feature_dim: usize,
    /// Spatial size W x H of the backbone output.
    pub map_w: usize,
    pub map_h: usize,
    /// Class count K of the classifier head.
    pub classes: usize,
    /// Pool each re-weighted map to a channel vector before projecting.
    /// Shrinks the projection from D x (W*H*C) to D x C.
    pub pool_before_fc: bool,
    pub backbone: Vec<StageSpec>,
}

impl OsmeConfig {
    /// Default desk-scale model: 16x16 grayscale in, 4x4x32 feature map,
    /// two branches.
    pub fn desk(classes: usize) -> OsmeConfig {
        OsmeConfig {
            branches: 2,
            channels: 32,
            reduction: 4,
            feature_dim: 16,
            map_w: 4,
            map_h: 4,
            classes,
            pool_before_fc: false,
            backbone: vec![
                StageSpec { channels: 16, kernel: 3, pool: true },
                StageSpec { channels: 32, kernel: 3, pool: true },
            ],
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checks.
    pub fn micro() -> OsmeConfig {
        OsmeConfig {
            branches: 2,
            channels: 8,
            reduction: 2,
            feature_dim: 4,
            map_w: 4,
            map_h: 4,
            classes: 2,
            pool_before_fc: false,
            backbone: vec![StageSpec { channels: 8, kernel: 3, pool: true }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(OsmeError::BadConfig(msg));
        if self.branches < 1 {
            return bad("branches must be >= 1".into());
        }
        if self.channels < 1 || self.feature_dim < 1 || self.map_w < 1 || self.map_h < 1 {
            return bad("all dimensions must be >= 1".into());
        }
        if self.classes < 2 {
            return bad("classifier needs at least 2 classes".into());
        }
        if self.reduction < 1 || self.channels % self.reduction != 0 {
            return bad(format!(
                "channels {} not divisible by reduction {}",
                self.channels, self.reduction
            ));
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        let last = self.backbone.last().unwrap();
        if last.channels != self.channels {
            return bad(format!(
                "last backbone stage has {} channels, config says {}",
                last.channels, self.channels
            ));
        }
        let (mut w, mut h) = (self.input_w(), self.input_h());
        for (i, stage) in self.backbone.iter().enumerate() {
            if stage.channels < 1 {
                return bad(format!("stage {} has zero channels", i));
            }
            if stage.kernel % 2 == 0 || stage.kernel > w.min(h) {
                return bad(format!(
                    "stage {} kernel {} must be odd and fit in {}x{}",
                    i, stage.kernel, w, h
                ));
            }
            if stage.pool {
                if w % 2 != 0 || h % 2 != 0 {
                    return bad(format!("stage {} pools odd dims {}x{}", i, w, h));
                }
                w /= 2;
                h /= 2;
            }
        }
        Ok(())
    }

    /// Backbone input width: the configured map width doubled per pool.
    pub fn input_w(&self) -> usize {
        self.map_w << self.pool_stages()
    }

    pub fn input_h(&self) -> usize {
        self.map_h << self.pool_stages()
    }

    fn pool_stages(&self) -> usize {
        self.backbone.iter().filter(|s| s.pool).count()
    }

    /// Length of the vector the per-branch projection consumes.
    pub fn projection_input(&self) -> usize {
        if self.pool_before_fc {
            self.channels
        } else {
            self.map_w * self.map_h * self.channels
        }
    }
}

/// All trainable tensors. Branch parameter tensors are distinct objects;
/// nothing is shared across branches.
pub struct OsmeParams {
    pub backbone: Vec<Tensor>,
    /// Per branch: excitation bottleneck, (C/r) x C.
    pub excite_reduce: Vec<Tensor>,
    /// Per branch: excitation expansion, C x (C/r).
    pub excite_expand: Vec<Tensor>,
    /// Per branch: feature projection, D x projection_input.
    pub project: Vec<Tensor>,
    /// Classifier, K x (P*D) plus bias K.
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    Ok(Tensor::param(shape, data)?)
}

impl OsmeParams {
    /// Draw every tensor from `rng` in a fixed order, uniform in
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init(cfg: &OsmeConfig, rng: &mut ChaCha8Rng) -> Result<OsmeParams> {
        cfg.validate()?;
        let mut backbone = Vec::new();
        let mut cin = 1;
        for stage in &cfg.backbone {
            let shape = vec![stage.kernel, stage.kernel, cin, stage.channels];
            backbone.push(uniform_init(rng, shape, stage.kernel * stage.kernel * cin)?);
            cin = stage.channels;
        }
        let hidden = cfg.channels / cfg.reduction;
        let mut excite_reduce = Vec::new();
        let mut excite_expand = Vec::new();
        let mut project = Vec::new();
        for _ in 0..cfg.branches {
            excite_reduce.push(uniform_init(rng, vec![hidden, cfg.channels], cfg.channels)?);
            excite_expand.push(uniform_init(rng, vec![cfg.channels, hidden], hidden)?);
            project.push(uniform_init(
                rng,
                vec![cfg.feature_dim, cfg.projection_input()],
                cfg.projection_input(),
            )?);
        }
        let cls_in = cfg.branches * cfg.feature_dim;
        let cls_weight = uniform_init(rng, vec![cfg.classes, cls_in], cls_in)?;
        let cls_bias = uniform_init(rng, vec![cfg.classes], cls_in)?;
        Ok(OsmeParams { backbone, excite_reduce, excite_expand, project, cls_weight, cls_bias })
    }

    /// Stable name -> tensor listing; the order is the init draw order and
    /// the checkpoint serialization order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.backbone.iter().enumerate() {
            out.push((format!("backbone/conv{}", i), t.clone()));
        }
        for p in 0..self.excite_reduce.len() {
            out.push((format!("branch{}/excite_reduce", p), self.excite_reduce[p].clone()));
            out.push((format!("branch{}/excite_expand", p), self.excite_expand[p].clone()));
            out.push((format!("branch{}/project", p), self.project[p].clone()));
        }
        out.push(("classifier/weight".to_string(), self.cls_weight.clone()));
        out.push(("classifier/bias".to_string(), self.cls_bias.clone()));
        out
    }
}

/// Per-branch forward products for one image.
pub struct BranchOutput {
    /// Channel gate, in (0,1)^C.
    pub mask: Tensor,
    /// Re-weighted feature map S.
    pub smap: Tensor,
    /// Projected branch feature, length D.
    pub feature: Tensor,
}

pub struct ImageForward {
    /// Backbone output U.
    pub u: Tensor,
    pub branches: Vec<BranchOutput>,
    pub logits: Tensor,
}

/// Spatial mean per channel: z_c = (1/WH) sum over (w,h) of U(w,h,c).
pub fn squeeze(u: &Tensor) -> Result<Tensor> {
    Ok(u.global_avg_pool()?)
}

/// Channel re-weighting: S(w,h,c) = m_c * U(w,h,c).
pub fn reweight(u: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = u.shape();
    if shape.len() != 3 || mask.shape() != [shape[2]] {
        return Err(OsmeError::Tensor(TensorError::ShapeMismatch {
            op: "reweight",
            detail: format!("map {:?} vs mask {:?}", shape, mask.shape()),
        }));
    }
    Ok(u.mul(&mask.broadcast_channel(shape[0], shape[1])?)?)
}

pub struct OsmeModel {
    pub cfg: OsmeConfig,
    pub params: OsmeParams,
}

impl OsmeModel {
    pub fn new(cfg: OsmeConfig, rng: &mut ChaCha8Rng) -> Result<OsmeModel> {
        let params = OsmeParams::init(&cfg, rng)?;
        Ok(OsmeModel { cfg, params })
    }

    pub fn from_parts(cfg: OsmeConfig, params: OsmeParams) -> Result<OsmeModel> {
        cfg.validate()?;
        Ok(OsmeModel { cfg, params })
    }

    /// Desk-scale stand-in for a deep residual backbone: conv/relu with
    /// optional pooling per stage.
    pub fn backbone(&self, image: &Tensor) -> Result<Tensor> {
        let want = [self.cfg.input_w(), self.cfg.input_h(), 1];
        if image.shape() != want {
            return Err(OsmeError::Tensor(TensorError::ShapeMismatch {
                op: "backbone",
                detail: format!("image {:?}, expected {:?}", image.shape(), want),
            }));
        }
        let mut x = image.clone();
        for (stage, kernel) in self.cfg.backbone.iter().zip(&self.params.backbone) {
            x = x.conv2d(kernel)?.relu()?;
            if stage.pool {
                x = x.max_pool2()?;
            }
        }
        Ok(x)
    }

    /// Branch gate: m = sigmoid(W_expand relu(W_reduce z)). Uses only
    /// branch `p`'s parameters.
    pub fn excite(&self, z: &Tensor, p: usize) -> Result<Tensor> {
        if p >= self.cfg.branches {
            return Err(OsmeError::BranchOutOfRange { branch: p, branches: self.cfg.branches });
        }
        let hidden = self.params.excite_reduce[p].matmul(z)?.relu()?;
        Ok(self.params.excite_expand[p].matmul(&hidden)?.sigmoid()?)
    }

    /// Branch feature: f = W_project vec(S), or W_project pooled(S) when
    /// configured.
    pub fn attend(&self, smap: &Tensor, p: usize) -> Result<Tensor> {
        if p >= self.cfg.branches {
            return Err(OsmeError::BranchOutOfRange { branch: p, branches: self.cfg.branches });
        }
        let v = if self.cfg.pool_before_fc { smap.global_avg_pool()? } else { smap.flatten()? };
        Ok(self.params.project[p].matmul(&v)?)
    }

    /// Full pipeline for one image: backbone, one squeeze, P excitations,
    /// P re-weightings, P projections, one classifier read.
    pub fn forward_image(&self, image: &Tensor) -> Result<ImageForward> {
        let u = self.backbone(image)?;
        let z = squeeze(&u)?;
        let mut branches = Vec::with_capacity(self.cfg.branches);
        for p in 0..self.cfg.branches {
            let mask = self.excite(&z, p)?;
            let smap = reweight(&u, &mask)?;
            let feature = self.attend(&smap, p)?;
            branches.push(BranchOutput { mask, smap, feature });
        }
        let feats: Vec<Tensor> = branches.iter().map(|b| b.feature.clone()).collect();
        let logits = self.params.cls_weight.matmul(&concat(&feats)?)?.add(&self.params.cls_bias)?;
        Ok(ImageForward { u, branches, logits })
    }

    /// Forward a whole batch in order.
    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Vec<ImageForward>> {
        images.iter().map(|img| self.forward_image(img)).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.params.named()
    }
}

/// Channel-mean heatmap of a re-weighted feature map, min-max normalized
/// into [0,1]. A constant raw map normalizes to all zeros.
pub struct Heatmap {
    pub w: usize,
    pub h: usize,
    /// Row-major over (w, h), same cell order as the feature map.
    pub values: Vec<f64>,
}

pub fn heatmap(smap: &Tensor) -> Result<Heatmap> {
    let [w, h, c] = *smap.shape() else {
        return Err(OsmeError::Tensor(TensorError::ShapeMismatch {
            op: "heatmap",
            detail: format!("expected [W,H,C], got {:?}", smap.shape()),
        }));
    };
    let data = smap.data();
    let mut raw = vec![0.0; w * h];
    for (cell, r) in raw.iter_mut().enumerate() {
        let base = cell * c;
        *r = data[base..base + c].iter().sum::<f64>() / c as f64;
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; w * h]
    };
    Ok(Heatmap { w, h, values })
}

impl Heatmap {
    /// Cell of the maximum value; first in (w, h) scan order on ties.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for iw in 0..self.w {
            for ih in 0..self.h {
                let v = self.values[iw * self.h + ih];
                if v > best_v {
                    best_v = v;
                    best = (iw, ih);
                }
            }
        }
        best
    }

    /// 8-bit binary PGM bytes; `w` indexes columns, `h` rows.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        for ih in 0..self.h {
            for iw in 0..self.w {
                let v = self.values[iw * self.h + ih].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_STEP};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> Tensor {
        let data = (0..w * h).map(|_| r.gen::<f64>()).collect();
        Tensor::literal(vec![w, h, 1], data).unwrap()
    }

    #[test]
    fn desk_config_maps_16x16_input_to_4x4x32() {
        let cfg = OsmeConfig::desk(8);
        cfg.validate().unwrap();
        assert_eq!((cfg.input_w(), cfg.input_h()), (16, 16));
        let model = OsmeModel::new(cfg, &mut rng(1)).unwrap();
        let u = model.backbone(&rand_image(&mut rng(2), 16, 16)).unwrap();
        assert_eq!(u.shape(), &[4, 4, 32]);
    }

    #[test]
    fn zero_backbone_maps_any_image_to_zeros() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(3)).unwrap();
        for k in &model.params.backbone {
            k.set_data(&vec![0.0; k.numel()]).unwrap();
        }
        let u = model.backbone(&rand_image(&mut rng(4), 8, 8)).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_gives_bit_identical_forward() {
        let img = rand_image(&mut rng(5), 8, 8);
        let run = || {
            let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(6)).unwrap();
            model.forward_image(&img).unwrap().logits.to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn backbone_rejects_wrong_input_shape() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(7)).unwrap();
        let img = rand_image(&mut rng(8), 4, 4);
        assert!(matches!(model.backbone(&img), Err(OsmeError::Tensor(_))));
    }

    #[test]
    fn squeeze_averages_each_channel() {
        let u = Tensor::literal(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(*squeeze(&u).unwrap().data(), vec![0.25]);

        let c = Tensor::literal(vec![3, 2, 2], vec![0.7; 12]).unwrap();
        let z = squeeze(&c).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn squeeze_is_permutation_invariant_over_cells() {
        let mut r = rng(9);
        let data: Vec<f64> = (0..18).map(|_| r.gen::<f64>()).collect();
        let u = Tensor::literal(vec![3, 3, 2], data.clone()).unwrap();
        // Reverse whole cells (channel pairs stay together).
        let mut swapped = Vec::new();
        for cell in (0..9).rev() {
            swapped.extend_from_slice(&data[cell * 2..cell * 2 + 2]);
        }
        let v = Tensor::literal(vec![3, 3, 2], swapped).unwrap();
        let (zu, zv) = (squeeze(&u).unwrap(), squeeze(&v).unwrap());
        for (a, b) in zu.data().iter().zip(zv.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn excite_with_zero_weights_or_zero_input_gates_at_half() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(10)).unwrap();
        let z = Tensor::literal(vec![8], vec![0.3; 8]).unwrap();
        let w = &model.params;
        w.excite_reduce[0].set_data(&vec![0.0; w.excite_reduce[0].numel()]).unwrap();
        w.excite_expand[0].set_data(&vec![0.0; w.excite_expand[0].numel()]).unwrap();
        assert!(model.excite(&z, 0).unwrap().data().iter().all(|&m| m == 0.5));

        // Branch 1 keeps random weights; a zero squeeze still lands on 0.5.
        let zero = Tensor::literal(vec![8], vec![0.0; 8]).unwrap();
        assert!(model.excite(&zero, 1).unwrap().data().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn excite_matches_a_hand_evaluated_gate() {
        // C=4, r=2: reduce is 2x4, expand is 4x2.
        let mut cfg = OsmeConfig::micro();
        cfg.channels = 4;
        cfg.reduction = 2;
        cfg.backbone = vec![StageSpec { channels: 4, kernel: 3, pool: true }];
        let model = OsmeModel::new(cfg, &mut rng(11)).unwrap();
        let reduce = [0.5, -0.25, 0.0, 1.0, 0.75, 0.5, -0.5, 0.25];
        let expand = [1.0, 0.0, 0.0, 1.0, 0.5, 0.5, -1.0, 0.25];
        model.params.excite_reduce[0].set_data(&reduce).unwrap();
        model.params.excite_expand[0].set_data(&expand).unwrap();
        let z = [0.2, 0.4, -0.6, 0.8];
        let got = model.excite(&Tensor::vector(z.to_vec()).unwrap(), 0).unwrap();

        let mut hidden = [0.0; 2];
        for i in 0..2 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += reduce[i * 4 + j] * z[j];
            }
            hidden[i] = acc.max(0.0);
        }
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..2 {
                acc += expand[i * 2 + j] * hidden[j];
            }
            let want = 1.0 / (1.0 + (-acc).exp());
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn excite_rejects_out_of_range_branch() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(12)).unwrap();
        let z = Tensor::literal(vec![8], vec![0.0; 8]).unwrap();
        assert!(matches!(
            model.excite(&z, 2),
            Err(OsmeError::BranchOutOfRange { branch: 2, branches: 2 })
        ));
    }

    #[test]
    fn masks_stay_strictly_inside_the_unit_interval() {
        let model = OsmeModel::new(OsmeConfig::desk(8), &mut rng(13)).unwrap();
        let fwd = model.forward_image(&rand_image(&mut rng(14), 16, 16)).unwrap();
        for b in &fwd.branches {
            assert!(b.mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }

    #[test]
    fn reweight_scales_each_channel_by_its_gate() {
        let u = Tensor::literal(vec![2, 1, 2], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let m = Tensor::vector(vec![0.5, 1.0]).unwrap();
        let s = reweight(&u, &m).unwrap();
        assert_eq!(*s.data(), vec![1.0, 2.0, 1.0, 2.0]);

        let zero_mask = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(reweight(&u, &zero_mask).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reweight_matches_a_triple_loop_and_is_linear_in_the_map() {
        let mut r = rng(15);
        let (w, h, c) = (3, 4, 2);
        let u_data: Vec<f64> = (0..w * h * c).map(|_| 2.0 * r.gen::<f64>() - 1.0).collect();
        let m_data: Vec<f64> = (0..c).map(|_| r.gen::<f64>()).collect();
        let u = Tensor::literal(vec![w, h, c], u_data.clone()).unwrap();
        let m = Tensor::vector(m_data.clone()).unwrap();
        let s = reweight(&u, &m).unwrap();
        for iw in 0..w {
            for ih in 0..h {
                for ic in 0..c {
                    let idx = (iw * h + ih) * c + ic;
                    assert!((s.data()[idx] - m_data[ic] * u_data[idx]).abs() < 1e-12);
                }
            }
        }

        let alpha = 1.7;
        let scaled = reweight(&u.scalar_mul(alpha).unwrap(), &m).unwrap();
        for (a, b) in scaled.data().iter().zip(s.data().iter()) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_is_linear_and_matches_a_naive_matvec() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(16)).unwrap();
        let zeros = Tensor::literal(vec![4, 4, 8], vec![0.0; 128]).unwrap();
        assert!(model.attend(&zeros, 0).unwrap().data().iter().all(|&v| v == 0.0));

        let mut r = rng(17);
        let s_data: Vec<f64> = (0..128).map(|_| 2.0 * r.gen::<f64>() - 1.0).collect();
        let s = Tensor::literal(vec![4, 4, 8], s_data.clone()).unwrap();
        let f = model.attend(&s, 1).unwrap();
        let w3 = model.params.project[1].data();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..128 {
                acc += w3[i * 128 + j] * s_data[j];
            }
            assert!((f.data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_rows_in_the_projection_pick_leading_entries() {
        let mut cfg = OsmeConfig::micro();
        cfg.feature_dim = 4;
        let model = OsmeModel::new(cfg, &mut rng(18)).unwrap();
        let mut eye = vec![0.0; 4 * 128];
        for i in 0..4 {
            eye[i * 128 + i] = 1.0;
        }
        model.params.project[0].set_data(&eye).unwrap();
        let mut r = rng(19);
        let s_data: Vec<f64> = (0..128).map(|_| r.gen::<f64>()).collect();
        let s = Tensor::literal(vec![4, 4, 8], s_data.clone()).unwrap();
        let f = model.attend(&s, 0).unwrap();
        assert_eq!(*f.data(), s_data[..4]);
    }

    #[test]
    fn duplicated_images_produce_identical_feature_rows() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(20)).unwrap();
        let img = rand_image(&mut rng(21), 8, 8);
        let fwd = model.forward_batch(&[img.clone(), img]).unwrap();
        for p in 0..2 {
            let a = fwd[0].branches[p].feature.to_vec();
            let b = fwd[1].branches[p].feature.to_vec();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn branch_features_ignore_other_branches_parameters() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(22)).unwrap();
        let img = rand_image(&mut rng(23), 8, 8);
        let before = model.forward_image(&img).unwrap().branches[0].feature.to_vec();

        for t in [
            &model.params.excite_reduce[1],
            &model.params.excite_expand[1],
            &model.params.project[1],
        ] {
            let bumped: Vec<f64> = t.data().iter().map(|v| v + 0.37).collect();
            t.set_data(&bumped).unwrap();
        }
        let after = model.forward_image(&img).unwrap().branches[0].feature.to_vec();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn degenerate_single_branch_single_pair_still_forwards() {
        let mut cfg = OsmeConfig::micro();
        cfg.branches = 1;
        let model = OsmeModel::new(cfg, &mut rng(24)).unwrap();
        let imgs = [rand_image(&mut rng(25), 8, 8), rand_image(&mut rng(26), 8, 8)];
        let fwd = model.forward_batch(&imgs).unwrap();
        assert_eq!(fwd.len(), 2);
        assert_eq!(fwd[0].branches.len(), 1);
        assert_eq!(fwd[0].branches[0].feature.shape(), &[4]);
        assert_eq!(fwd[0].logits.shape(), &[2]);
    }

    #[test]
    fn micro_net_logits_match_a_scripted_evaluation() {
        // Independent re-evaluation of the whole pipeline with plain loops.
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(27)).unwrap();
        let img = rand_image(&mut rng(28), 8, 8);
        let fwd = model.forward_image(&img).unwrap();

        let img_d = img.to_vec();
        let ker = model.params.backbone[0].to_vec();
        // conv 3x3, 1 -> 8 channels, zero padding, then relu.
        let mut conv = vec![0.0; 8 * 8 * 8];
        for ow in 0..8 {
            for oh in 0..8 {
                for co in 0..8 {
                    let mut acc = 0.0;
                    for dw in 0..3 {
                        for dh in 0..3 {
                            let (iw, ih) = (ow + dw, oh + dh);
                            if iw < 1 || ih < 1 || iw - 1 >= 8 || ih - 1 >= 8 {
                                continue;
                            }
                            acc += img_d[(iw - 1) * 8 + (ih - 1)] * ker[((dw * 3 + dh) * 1) * 8 + co];
                        }
                    }
                    conv[(ow * 8 + oh) * 8 + co] = acc.max(0.0);
                }
            }
        }
        // 2x2 max-pool to 4x4x8.
        let mut u = vec![0.0; 4 * 4 * 8];
        for pw in 0..4 {
            for ph in 0..4 {
                for c in 0..8 {
                    let mut best = f64::NEG_INFINITY;
                    for dw in 0..2 {
                        for dh in 0..2 {
                            best = best.max(conv[((2 * pw + dw) * 8 + 2 * ph + dh) * 8 + c]);
                        }
                    }
                    u[(pw * 4 + ph) * 8 + c] = best;
                }
            }
        }
        // squeeze
        let mut z = [0.0; 8];
        for cell in 0..16 {
            for c in 0..8 {
                z[c] += u[cell * 8 + c] / 16.0;
            }
        }
        // both branches, then classifier
        let mut features = Vec::new();
        for p in 0..2 {
            let red = model.params.excite_reduce[p].to_vec();
            let exp = model.params.excite_expand[p].to_vec();
            let proj = model.params.project[p].to_vec();
            let mut hid = [0.0; 4];
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..8 {
                    acc += red[i * 8 + j] * z[j];
                }
                hid[i] = acc.max(0.0);
            }
            let mut mask = [0.0; 8];
            for i in 0..8 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += exp[i * 4 + j] * hid[j];
                }
                mask[i] = 1.0 / (1.0 + (-acc).exp());
            }
            let mut s = vec![0.0; 128];
            for cell in 0..16 {
                for c in 0..8 {
                    s[cell * 8 + c] = mask[c] * u[cell * 8 + c];
                }
            }
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..128 {
                    acc += proj[i * 128 + j] * s[j];
                }
                features.push(acc);
            }
        }
        let wc = model.params.cls_weight.to_vec();
        let bc = model.params.cls_bias.to_vec();
        for k in 0..2 {
            let mut acc = bc[k];
            for j in 0..8 {
                acc += wc[k * 8 + j] * features[j];
            }
            assert!(
                (fwd.logits.data()[k] - acc).abs() < 1e-10,
                "logit {}: {} vs scripted {}",
                k,
                fwd.logits.data()[k],
                acc
            );
        }
    }

    #[test]
    fn classifier_gradient_passes_the_finite_difference_check() {
        let model = OsmeModel::new(OsmeConfig::micro(), &mut rng(29)).unwrap();
        let imgs = [rand_image(&mut rng(30), 8, 8), rand_image(&mut rng(31), 8, 8)];
        let labels = [0usize, 1usize];
        let params = model.named_params();
        let loss = || -> Result<Tensor> {
            let fwd = model.forward_batch(&imgs)?;
            let mut total: Option<Tensor> = None;
            for (f, &y) in fwd.iter().zip(&labels) {
                let ce = f.logits.softmax_cross_entropy(y)?;
                total = Some(match total {
                    Some(t) => t.add(&ce)?,
                    None => ce,
                });
            }
            Ok(total.unwrap().scalar_mul(0.5)?)
        };
        let report = grad_check(loss, &params, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error <= 1e-4, "max {}", report.max_rel_error);
    }

    #[test]
    fn heatmap_normalizes_and_finds_peaks() {
        let flat = Tensor::literal(vec![2, 2, 3], vec![0.4; 12]).unwrap();
        let hm = heatmap(&flat).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));

        let mut data = vec![0.0; 12];
        data[3] = 0.9; // cell (0,1), channel 0
        let spike = Tensor::literal(vec![2, 2, 3], data).unwrap();
        let hm = heatmap(&spike).unwrap();
        assert_eq!(hm.peak(), (0, 1));
        assert_eq!(hm.values[1], 1.0);
        assert_eq!(hm.values.iter().filter(|&&v| v == 0.0).count(), 3);
    }

    #[test]
    fn heatmap_matches_a_loop_computed_channel_mean() {
        let mut r = rng(32);
        let (w, h, c) = (4, 3, 5);
        let data: Vec<f64> = (0..w * h * c).map(|_| r.gen::<f64>()).collect();
        let s = Tensor::literal(vec![w, h, c], data.clone()).unwrap();
        let hm = heatmap(&s).unwrap();

        let mut raw = vec![0.0; w * h];
        for iw in 0..w {
            for ih in 0..h {
                let mut acc = 0.0;
                for ic in 0..c {
                    acc += data[(iw * h + ih) * c + ic];
                }
                raw[iw * h + ih] = acc / c as f64;
            }
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (got, r0) in hm.values.iter().zip(&raw) {
            assert!((got - (r0 - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_bytes_carry_header_and_row_major_pixels() {
        let hm = Heatmap { w: 2, h: 2, values: vec![0.0, 1.0, 0.5, 0.25] };
        let bytes = hm.to_pgm();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // Rows: (iw=0,ih=0), (iw=1,ih=0) then (iw=0,ih=1), (iw=1,ih=1).
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
    }
}

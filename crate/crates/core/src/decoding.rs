//! Slot decoders and alpha compositing.
//!
//! Each slot is broadcast over the `h x w` grid and concatenated with the position ramp.
//! The mask decoder alternates nearest x2 upsampling with 3x3 convolutions, may stop short
//! of full resolution and upsample its logits bilinearly, and ends in a softmax across slots.
//! The layer decoder uses stride-2 transposed convolutions and a sigmoid. The two stacks have
//! disjoint parameters. With `image_skip` the mask decoder also sees the crop, area-downsampled
//! to each stage's resolution.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::binding::position_ramp;
use crate::conv::{avg_pool, ConvGeometry};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn log2_exact(eta: usize) -> Result<usize> {
    if eta.is_power_of_two() {
        Ok(eta.trailing_zeros() as usize)
    } else {
        Err(Error::validation(format!("downsampling ratio must be a power of two, got {eta}")))
    }
}

/// `[B, K, D] -> [B*K, D + 4, h, w]`: spatial broadcast plus position ramp.
pub fn broadcast_slots<T: Scalar>(g: &mut Graph<T>, slots: Var, h: usize, w: usize) -> Var {
    let [b, k, d]: [usize; 3] = g.shape(slots).try_into().expect("slots are [B, K, D]");
    let flat = g.reshape(slots, &[b * k, d, 1, 1]);
    let grid = g.broadcast_to(flat, &[b * k, d, h, w]);
    let ramp = position_ramp::<T>(h, w).reshape(&[1, 4, h, w]).broadcast_to(&[b * k, 4, h, w]);
    let rv = g.constant(ramp);
    g.concat(&[grid, rv], 1)
}

/// `[B, 3, H, W]` crops pooled by `factor` and repeated per slot: `[B*K, 3, H/f, W/f]`.
fn repeated_image<T: Scalar>(crops: &Tensor<T>, factor: usize, k: usize) -> Tensor<T> {
    let small = if factor == 1 { crops.clone() } else { avg_pool(crops, factor) };
    let [b, c, h, w]: [usize; 4] = small.shape().try_into().expect("NCHW crops");
    small.reshape(&[b, 1, c, h, w]).broadcast_to(&[b, k, c, h, w]).reshape(&[b * k, c, h, w])
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    stages: Vec<Conv2d>,
    head: Conv2d,
    pub image_skip: bool,
    levels: usize,
}

impl MaskDecoder {
    /// Number of bilinear x2 steps applied to the logits after the last convolution.
    pub fn logit_upsamplings(&self) -> usize {
        self.levels + 1 - self.stages.len()
    }
}

impl MaskDecoder {
    /// `channels` has one width per convolution stage, coarsest first. Stage `i` runs at
    /// `2^i` times the grid resolution; up to `log2(eta) + 1` stages. Remaining factors of two
    /// are covered by bilinear upsampling of the logits.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        eta: usize,
        channels: &[usize],
        image_skip: bool,
    ) -> Result<Self> {
        let levels = log2_exact(eta)?;
        if channels.is_empty() || channels.len() > levels + 1 {
            return Err(Error::validation(format!(
                "mask decoder takes 1 to {} widths, got {}",
                levels + 1,
                channels.len()
            )));
        }
        let skip = if image_skip { 3 } else { 0 };
        let geom = ConvGeometry::new(3, 1, 1);
        let mut stages = Vec::new();
        let mut in_ch = dim + 4;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv2d::new(store, rng, &format!("mask_dec.conv{i}"), in_ch + skip, c, geom));
            in_ch = c;
        }
        let head = Conv2d::new(store, rng, "mask_dec.head", in_ch + skip, 1, geom);
        Ok(MaskDecoder { stages, head, image_skip, levels })
    }

    /// Per-pixel logits `[B, K, H, W]`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        slots: Var,
        crops: Option<&Tensor<T>>,
        grid: (usize, usize),
    ) -> Result<Var> {
        let [b, k, _]: [usize; 3] =
            g.shape(slots).try_into().map_err(|_| Error::validation("slots must be [B, K, D]"))?;
        let crops = match (self.image_skip, crops) {
            (true, Some(c)) => {
                let (hh, ww) = (grid.0 << self.levels, grid.1 << self.levels);
                if c.shape() != [b, 3, hh, ww] {
                    return Err(Error::validation(format!(
                        "mask decoder crops {:?}, expected {:?}",
                        c.shape(),
                        [b, 3, hh, ww]
                    )));
                }
                Some(c)
            }
            (true, None) => return Err(Error::validation("mask decoder with image skip needs the crops")),
            (false, _) => None,
        };
        let with_image = |g: &mut Graph<T>, x: Var, level: usize| -> Var {
            match crops {
                Some(c) => {
                    let img = g.constant(repeated_image(c, 1 << (self.levels - level), k));
                    g.concat(&[x, img], 1)
                }
                None => x,
            }
        };
        let mut x = broadcast_slots(g, slots, grid.0, grid.1);
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                x = g.upsample_nearest(x, 2);
            }
            let xi = with_image(g, x, i);
            let y = conv.forward(g, store, xi);
            x = g.relu(y);
        }
        let last = self.stages.len() - 1;
        let xi = with_image(g, x, last);
        let mut out = self.head.forward(g, store, xi);
        for _ in 0..self.logit_upsamplings() {
            out = g.upsample_bilinear2(out);
        }
        let [_, _, hh, ww]: [usize; 4] = g.shape(out).try_into().expect("rank 4");
        Ok(g.reshape(out, &[b, k, hh, ww]))
    }

    /// Alpha masks `[B, K, H, W]`, a softmax across slots at every pixel.
    pub fn decode_masks<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        slots: Var,
        crops: Option<&Tensor<T>>,
        grid: (usize, usize),
    ) -> Result<Var> {
        let l = self.logits(g, store, slots, crops, grid)?;
        Ok(g.softmax(l, 1))
    }
}

#[derive(Clone, Debug)]
pub struct LayerDecoder {
    stem: Conv2d,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl LayerDecoder {
    /// `channels`: stem width followed by one width per x2 stage (`log2(eta) + 1` entries).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        eta: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let levels = log2_exact(eta)?;
        if channels.len() != levels + 1 {
            return Err(Error::validation(format!(
                "layer decoder needs {} widths, got {}",
                levels + 1,
                channels.len()
            )));
        }
        let stem = Conv2d::new(store, rng, "layer_dec.stem", dim + 4, channels[0], ConvGeometry::new(3, 1, 1));
        let ups = (0..levels)
            .map(|i| {
                ConvTranspose2d::new(
                    store,
                    rng,
                    &format!("layer_dec.up{i}"),
                    channels[i],
                    channels[i + 1],
                    ConvGeometry::new(4, 2, 1),
                )
            })
            .collect();
        let head = Conv2d::new(store, rng, "layer_dec.head", channels[levels], 3, ConvGeometry::new(3, 1, 1));
        Ok(LayerDecoder { stem, ups, head })
    }

    /// Layer images `[B, K, 3, H, W]` in `(0, 1)`.
    pub fn decode_layers<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        slots: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let [b, k, _]: [usize; 3] =
            g.shape(slots).try_into().map_err(|_| Error::validation("slots must be [B, K, D]"))?;
        let x0 = broadcast_slots(g, slots, grid.0, grid.1);
        let y = self.stem.forward(g, store, x0);
        let mut x = g.relu(y);
        for up in &self.ups {
            let y = up.forward(g, store, x);
            x = g.relu(y);
        }
        let y = self.head.forward(g, store, x);
        let s = g.sigmoid(y);
        let [_, _, hh, ww]: [usize; 4] = g.shape(s).try_into().expect("rank 4");
        Ok(g.reshape(s, &[b, k, 3, hh, ww]))
    }
}

/// `Î = Σ_k α_k ⊙ Î_k` with `alpha: [B, K, H, W]`, `layers: [B, K, 3, H, W]` -> `[B, 3, H, W]`.
/// Fails if the masks do not sum to one per pixel (within 1e-3).
pub fn compose<T: Scalar>(g: &mut Graph<T>, alpha: Var, layers: Var) -> Result<Var> {
    let (sa, sl) = (g.shape(alpha).to_vec(), g.shape(layers).to_vec());
    let [b, k, h, w]: [usize; 4] =
        sa.as_slice().try_into().map_err(|_| Error::validation(format!("alpha {sa:?} is not [B, K, H, W]")))?;
    if sl != [b, k, 3, h, w] {
        return Err(Error::validation(format!("layers {sl:?} do not match alpha {sa:?}")));
    }
    let sums = g.value(alpha).sum_axis(1);
    let worst = sums.data().iter().map(|s| (s.as_f64() - 1.0).abs()).fold(0.0, f64::max);
    if worst > 1e-3 {
        return Err(Error::Internal(format!("alpha masks are not normalized (max deviation {worst:.2e})")));
    }
    let a5 = g.reshape(alpha, &[b, k, 1, h, w]);
    let ab = g.broadcast_to(a5, &[b, k, 3, h, w]);
    let prod = g.mul(ab, layers);
    let s = g.sum_axis(prod, 1);
    Ok(g.reshape(s, &[b, 3, h, w]))
}

/// Masks, layers and their composition for a batch.
#[derive(Clone, Copy, Debug)]
pub struct LayerStack {
    pub alpha: Var,
    pub layers: Var,
    pub recon: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoders(skip: bool) -> (ParamStore<f64>, MaskDecoder, LayerDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MaskDecoder::new(&mut store, &mut rng, 5, 4, &[6, 4, 3], skip).unwrap();
        let l = LayerDecoder::new(&mut store, &mut rng, 5, 4, &[6, 4, 3]).unwrap();
        (store, m, l)
    }

    fn swap_slots(t: &Tensor<f64>) -> Tensor<f64> {
        Tensor::concat(&[&t.narrow(1, 1, 1), &t.narrow(1, 0, 1)], 1)
    }

    #[test]
    fn masks_are_normalized_and_layers_bounded() {
        for skip in [false, true] {
            let (store, m, l) = decoders(skip);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let crops = Tensor::uniform(&[2, 3, 8, 12], 0.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let s = g.constant(Tensor::uniform(&[2, 2, 5], -2.0, 2.0, &mut rng));
            let a = m.decode_masks(&mut g, &store, s, Some(&crops), (2, 3)).unwrap();
            assert_eq!(g.shape(a), &[2, 2, 8, 12]);
            assert!(g.value(a).sum_axis(1).data().iter().all(|v| (v - 1.0).abs() < 1e-5));
            let layers = l.decode_layers(&mut g, &store, s, (2, 3)).unwrap();
            assert_eq!(g.shape(layers), &[2, 2, 3, 8, 12]);
            assert!(g.value(layers).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn short_mask_decoder_upsamples_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let crops = Tensor::uniform(&[2, 3, 8, 12], 0.0, 1.0, &mut rng);
        let slots = Tensor::<f64>::uniform(&[2, 2, 5], -2.0, 2.0, &mut rng);
        for widths in [&[6, 4][..], &[6][..]] {
            let mut store = ParamStore::new();
            let m = MaskDecoder::new(&mut store, &mut rng, 5, 4, widths, true).unwrap();
            assert_eq!(m.logit_upsamplings(), 3 - widths.len());
            let mut g = Graph::new();
            let s = g.constant(slots.clone());
            let a = m.decode_masks(&mut g, &store, s, Some(&crops), (2, 3)).unwrap();
            assert_eq!(g.shape(a), &[2, 2, 8, 12]);
            assert!(g.value(a).sum_axis(1).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
            let sw = g.constant(swap_slots(&slots));
            let b = m.decode_masks(&mut g, &store, sw, Some(&crops), (2, 3)).unwrap();
            assert_eq!(g.value(b), &swap_slots(g.value(a)));
        }
        let mut store = ParamStore::<f64>::new();
        assert!(MaskDecoder::new(&mut store, &mut rng, 5, 4, &[6, 4, 3, 2], true).is_err());
        assert!(MaskDecoder::new(&mut store, &mut rng, 5, 4, &[], true).is_err());
    }

    #[test]
    fn equal_slots_give_uniform_masks_and_equal_layers() {
        let (store, m, l) = decoders(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let crops = Tensor::uniform(&[1, 3, 8, 12], 0.0, 1.0, &mut rng);
        let row = Tensor::<f64>::uniform(&[1, 1, 5], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.constant(row.broadcast_to(&[1, 2, 5]));
        let a = m.decode_masks(&mut g, &store, s, Some(&crops), (2, 3)).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
        let layers = l.decode_layers(&mut g, &store, s, (2, 3)).unwrap();
        let lv = g.value(layers);
        assert_eq!(lv.narrow(1, 0, 1), lv.narrow(1, 1, 1));
    }

    #[test]
    fn permuting_slots_permutes_outputs() {
        let (store, m, l) = decoders(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let crops = Tensor::uniform(&[2, 3, 8, 12], 0.0, 1.0, &mut rng);
        let slots = Tensor::<f64>::uniform(&[2, 2, 5], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let s0 = g.constant(slots.clone());
        let s1 = g.constant(swap_slots(&slots));
        let a0 = m.decode_masks(&mut g, &store, s0, Some(&crops), (2, 3)).unwrap();
        let a1 = m.decode_masks(&mut g, &store, s1, Some(&crops), (2, 3)).unwrap();
        assert_eq!(&swap_slots(g.value(a0)), g.value(a1));
        let l0 = l.decode_layers(&mut g, &store, s0, (2, 3)).unwrap();
        let l1 = l.decode_layers(&mut g, &store, s1, (2, 3)).unwrap();
        assert_eq!(&swap_slots(g.value(l0)), g.value(l1));
    }

    #[test]
    fn skip_needs_matching_crops() {
        let (store, m, _) = decoders(true);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(m.decode_masks(&mut g, &store, s, None, (2, 3)).is_err());
        let bad = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(m.decode_masks(&mut g, &store, s, Some(&bad), (2, 3)).is_err());
    }

    #[test]
    fn decoders_do_not_share_parameters() {
        let (store, _, _) = decoders(false);
        let names: Vec<&str> = store.names().collect();
        assert!(names.iter().all(|n| n.starts_with("mask_dec.") || n.starts_with("layer_dec.")));
        assert!(names.iter().any(|n| n.starts_with("mask_dec.")) && names.iter().any(|n| n.starts_with("layer_dec.")));
    }

    fn compose_values(alpha: &Tensor<f64>, layers: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let (a, l) = (g.constant(alpha.clone()), g.constant(layers.clone()));
        let out = compose(&mut g, a, l)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn compose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layers = Tensor::<f64>::uniform(&[1, 2, 3, 4, 5], 0.0, 1.0, &mut rng);
        let one_hot = Tensor::from_fn(&[1, 2, 4, 5], |i| if i < 20 { 1.0 } else { 0.0 });
        assert_eq!(compose_values(&one_hot, &layers).unwrap().data(), layers.narrow(1, 0, 1).data());

        let half = Tensor::full(&[1, 2, 4, 5], 0.5);
        let split = Tensor::from_fn(&[1, 2, 3, 4, 5], |i| if i < 60 { 0.0 } else { 1.0 });
        assert!(compose_values(&half, &split).unwrap().data().iter().all(|&v| v == 0.5));

        let bad = Tensor::full(&[1, 2, 4, 5], 0.6);
        assert!(matches!(compose_values(&bad, &layers), Err(Error::Internal(_))));
    }

    #[test]
    fn compose_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, k, h, w) = (2, 3, 4, 5);
        let logits = Tensor::<f64>::uniform(&[b, k, h, w], -3.0, 3.0, &mut rng);
        let alpha = crate::autograd::softmax(&logits, 1);
        let layers = Tensor::<f64>::uniform(&[b, k, 3, h, w], 0.0, 1.0, &mut rng);
        let out = compose_values(&alpha, &layers).unwrap();
        for bi in 0..b {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += alpha.at(&[bi, ki, y, x]) * layers.at(&[bi, ki, c, y, x]);
                        }
                        assert!((out.at(&[bi, c, y, x]) - acc).abs() <= 1e-6);
                    }
                }
            }
        }
        let scaled = compose_values(&alpha, &layers.scale(3.0)).unwrap();
        for (s, o) in scaled.data().iter().zip(out.data()) {
            assert!((s - 3.0 * o).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::uniform(&[1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let alpha = crate::autograd::softmax(&logits, 1);
        let layers = Tensor::uniform(&[1, 2, 3, 3, 4], 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::uniform(&[1, 3, 3, 4], 0.0, 1.0, &mut rng);
        let err = gradcheck::check(
            &[alpha, layers],
            |g, v| {
                let r = compose(g, v[0], v[1]).unwrap();
                let t = g.constant(target.clone());
                let d = g.sub(r, t);
                let sq = g.square(d);
                g.sum_all(sq)
            },
            1e-5,
        );
        assert!(err < 1e-6, "compose rel err {err}");
    }
}

//! Pixel feature pipeline: a small strided backbone emitting C3/C4/C5 and
//! the lightweight PPM-FPN pixel decoder emitting the enhanced E3/E4/E5
//! pyramid at strides 8/16/32.

use rand_chacha::ChaCha8Rng;

use crate::config::PixelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, VarStore};
use crate::tensor::{ops, Elem, Tensor};

/// Three feature maps at strides 8/16/32 with a shared channel count.
pub struct FeaturePyramid<E: Elem> {
    pub levels: [Tensor<E>; 3],
}

impl<E: Elem> FeaturePyramid<E> {
    pub fn hw(&self, level: usize) -> (usize, usize) {
        match self.levels[level].shape() {
            [_, h, w] => (*h, *w),
            _ => unreachable!("pyramid levels are 3-d"),
        }
    }
}

struct Stage<E: Elem> {
    down: Conv2d<E>,
    ln_down: LayerNorm<E>,
    conv: Conv2d<E>,
    ln_conv: LayerNorm<E>,
}

impl<E: Elem> Stage<E> {
    fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Stage {
            down: Conv2d::new(vs, rng, &format!("{name}.down"), cin, cout, 3, 2, 1),
            ln_down: LayerNorm::new(vs, &format!("{name}.ln_down"), cout),
            conv: Conv2d::new(vs, rng, &format!("{name}.conv"), cout, cout, 3, 1, 1),
            ln_conv: LayerNorm::new(vs, &format!("{name}.ln_conv"), cout),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = ops::silu(&self.ln_down.forward_chw(&self.down.forward(x)?)?);
        Ok(ops::silu(&self.ln_conv.forward_chw(&self.conv.forward(&h)?)?))
    }
}

/// Strided convnet: stem at stride 4, then three stride-2 stages for
/// C3/C4/C5. Normalization is layer norm over channels, so the forward is
/// deterministic and free of running statistics.
pub struct Backbone<E: Elem> {
    stem1: Conv2d<E>,
    stem_ln1: LayerNorm<E>,
    stem2: Conv2d<E>,
    stem_ln2: LayerNorm<E>,
    stages: [Stage<E>; 3],
    pub channels: [usize; 3],
}

impl<E: Elem> Backbone<E> {
    pub fn new(vs: &mut VarStore<E>, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let c_stem = dim / 2;
        let channels = [dim, dim + dim / 2, 2 * dim];
        Backbone {
            stem1: Conv2d::new(vs, rng, "backbone.stem1", 3, c_stem, 3, 2, 1),
            stem_ln1: LayerNorm::new(vs, "backbone.stem_ln1", c_stem),
            stem2: Conv2d::new(vs, rng, "backbone.stem2", c_stem, c_stem, 3, 2, 1),
            stem_ln2: LayerNorm::new(vs, "backbone.stem_ln2", c_stem),
            stages: [
                Stage::new(vs, rng, "backbone.stage3", c_stem, channels[0]),
                Stage::new(vs, rng, "backbone.stage4", channels[0], channels[1]),
                Stage::new(vs, rng, "backbone.stage5", channels[1], channels[2]),
            ],
            channels,
        }
    }

    pub fn forward(&self, image: &Tensor<E>) -> Result<FeaturePyramid<E>> {
        let (c, h, w) = match image.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("backbone: image shape {s:?}"))),
        };
        if c != 3 {
            return Err(Error::shape(format!("backbone: {c} channels, expected 3")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "backbone: input {h}x{w} not divisible by 32"
            )));
        }
        let s = ops::silu(&self.stem_ln1.forward_chw(&self.stem1.forward(image)?)?);
        let s = ops::silu(&self.stem_ln2.forward_chw(&self.stem2.forward(&s)?)?);
        let c3 = self.stages[0].forward(&s)?;
        let c4 = self.stages[1].forward(&c3)?;
        let c5 = self.stages[2].forward(&c4)?;
        Ok(FeaturePyramid {
            levels: [c3, c4, c5],
        })
    }
}

const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling on the top level: adaptive average pools at bins
/// {1,2,3,6}, 1x1 reductions, upsample, concat with the lateral, 3x3 fuse.
struct Ppm<E: Elem> {
    branches: Vec<Conv2d<E>>,
    fuse: Conv2d<E>,
    fuse_ln: LayerNorm<E>,
}

impl<E: Elem> Ppm<E> {
    fn new(vs: &mut VarStore<E>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let branch_dim = dim / 4;
        Ppm {
            branches: PPM_BINS
                .iter()
                .map(|b| Conv2d::new(vs, rng, &format!("{name}.bin{b}"), dim, branch_dim, 1, 1, 0))
                .collect(),
            fuse: Conv2d::new(vs, rng, &format!("{name}.fuse"), 2 * dim, dim, 3, 1, 1),
            fuse_ln: LayerNorm::new(vs, &format!("{name}.fuse_ln"), dim),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = match x.shape() {
            [_, h, w] => (*h, *w),
            s => return Err(Error::shape(format!("ppm: {s:?}"))),
        };
        let mut cat = x.clone();
        for (conv, &bins) in self.branches.iter().zip(PPM_BINS.iter()) {
            let pooled = ops::adaptive_avg_pool(x, bins, bins)?;
            let reduced = conv.forward(&pooled)?;
            let up = ops::bilinear_resize(&reduced, h, w)?;
            cat = concat_channels(&cat, &up)?;
        }
        Ok(ops::silu(
            &self.fuse_ln.forward_chw(&self.fuse.forward(&cat)?)?,
        ))
    }
}

fn concat_channels<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    // (Ca,H,W) + (Cb,H,W): channel concat is row concat of flattened planes
    let (ca, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("concat_channels: {s:?}"))),
    };
    let (cb, hb, wb) = match b.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("concat_channels: {s:?}"))),
    };
    if (h, w) != (hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: {h}x{w} vs {hb}x{wb}"
        )));
    }
    // channel planes are rows of length h*w in row-major storage
    let ar = reshape_3d_to_2d(a, ca, h * w)?;
    let br = reshape_3d_to_2d(b, cb, h * w)?;
    let cat = ops::concat_rows(&ar, &br)?;
    reshape_2d_to_3d(&cat, ca + cb, h, w)
}

fn reshape_3d_to_2d<E: Elem>(x: &Tensor<E>, r: usize, c: usize) -> Result<Tensor<E>> {
    // same storage order; implemented as a copy op with identity backward
    let data = x.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![r, c],
        vec![x.clone()],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    ))
}

fn reshape_2d_to_3d<E: Elem>(x: &Tensor<E>, c: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    let data = x.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![c, h, w],
        vec![x.clone()],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    ))
}

/// Lightweight pixel decoder: 1x1 lateral projections, optional PPM on the
/// top level, top-down bilinear-upsample-and-add, 3x3 smoothing per level.
pub struct PpmFpn<E: Elem> {
    lat: [Conv2d<E>; 3],
    ppm: Option<Ppm<E>>,
    smooth: [Conv2d<E>; 3],
    pub dim: usize,
}

impl<E: Elem> PpmFpn<E> {
    pub fn new(
        vs: &mut VarStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &PixelConfig,
        in_channels: [usize; 3],
    ) -> Self {
        let d = cfg.dim;
        PpmFpn {
            lat: [
                Conv2d::new(vs, rng, "fpn.lat3", in_channels[0], d, 1, 1, 0),
                Conv2d::new(vs, rng, "fpn.lat4", in_channels[1], d, 1, 1, 0),
                Conv2d::new(vs, rng, "fpn.lat5", in_channels[2], d, 1, 1, 0),
            ],
            ppm: cfg.use_ppm.then(|| Ppm::new(vs, rng, "fpn.ppm", d)),
            smooth: [
                Conv2d::new(vs, rng, "fpn.smooth3", d, d, 3, 1, 1),
                Conv2d::new(vs, rng, "fpn.smooth4", d, d, 3, 1, 1),
                Conv2d::new(vs, rng, "fpn.smooth5", d, d, 3, 1, 1),
            ],
            dim: d,
        }
    }

    pub fn forward(&self, c: &FeaturePyramid<E>) -> Result<FeaturePyramid<E>> {
        let lat3 = self.lat[0].forward(&c.levels[0])?;
        let lat4 = self.lat[1].forward(&c.levels[1])?;
        let lat5 = self.lat[2].forward(&c.levels[2])?;
        let p5 = match &self.ppm {
            Some(ppm) => ppm.forward(&lat5)?,
            None => lat5,
        };
        let (h4, w4) = c.hw(1);
        let p4 = ops::add(&lat4, &ops::bilinear_resize(&p5, h4, w4)?)?;
        let (h3, w3) = c.hw(0);
        let p3 = ops::add(&lat3, &ops::bilinear_resize(&p4, h3, w3)?)?;
        Ok(FeaturePyramid {
            levels: [
                self.smooth[0].forward(&p3)?,
                self.smooth[1].forward(&p4)?,
                self.smooth[2].forward(&p5)?,
            ],
        })
    }
}

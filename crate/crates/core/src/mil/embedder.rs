//! Instance embedders: map a normalized patch tensor to a spatial feature map
//! which is then reduced to a vector by spatial max-pooling.

use image::RgbImage;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `C x H x W` image or feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-channel maximum over all spatial positions.
    pub fn spatial_max(&self) -> Vec<f32> {
        (0..self.channels)
            .map(|c| {
                self.plane(c)
                    .iter()
                    .copied()
                    .fold(f32::NEG_INFINITY, f32::max)
            })
            .collect()
    }
}

/// Per-channel input statistics applied as `(x / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics used by the torchvision backbones.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, img: &RgbImage) -> Tensor3 {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor3::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = f32::from(px[c]) / 255.0;
                t.data[c * h * w + y as usize * w + x as usize] = (v - self.mean[c]) / self.std[c];
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Alexnet,
    Vgg16Bn,
    Resnet50,
    Densenet121,
    InceptionV3,
    /// Area-averaged 8x8 thumbnail, flattened; no parameters.
    Toy,
}

pub const TOY_THUMBNAIL: usize = 8;

impl Backbone {
    pub const ALL: [Backbone; 6] = [
        Backbone::Alexnet,
        Backbone::Vgg16Bn,
        Backbone::Resnet50,
        Backbone::Densenet121,
        Backbone::InceptionV3,
        Backbone::Toy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Alexnet => "alexnet",
            Backbone::Vgg16Bn => "vgg16_bn",
            Backbone::Resnet50 => "resnet50",
            Backbone::Densenet121 => "densenet121",
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Toy => "toy",
        }
    }

    /// Feature-map shape produced for a 3x256x256 input.
    pub fn output_shape(self) -> (usize, usize, usize) {
        match self {
            Backbone::Alexnet => (256, 6, 6),
            Backbone::Vgg16Bn => (512, 7, 7),
            Backbone::Resnet50 => (2048, 8, 8),
            Backbone::Densenet121 => (1024, 8, 8),
            Backbone::InceptionV3 => (2048, 6, 6),
            Backbone::Toy => (3 * TOY_THUMBNAIL * TOY_THUMBNAIL, 1, 1),
        }
    }

    pub fn feature_dim(self) -> usize {
        self.output_shape().0
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown backbone `{s}`")))
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    in_ch: usize,
    out_ch: usize,
    /// `out x in x 3 x 3`
    weight: Vec<f32>,
    bias: Vec<f32>,
    bn_scale: Vec<f32>,
    bn_shift: Vec<f32>,
}

impl ConvBnRelu {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        // kaiming normal, fan_out, relu gain
        let std = (2.0 / (out_ch as f32 * 9.0)).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let weight = (0..out_ch * in_ch * 9)
            .map(|_| normal.sample(rng))
            .collect();
        // eval-mode batch norm with unit running variance
        let eps = 1e-5f32;
        ConvBnRelu {
            in_ch,
            out_ch,
            weight,
            bias: vec![0.0; out_ch],
            bn_scale: vec![1.0 / (1.0 + eps).sqrt(); out_ch],
            bn_shift: vec![0.0; out_ch],
        }
    }

    fn forward(&self, input: &Tensor3) -> Tensor3 {
        let (h, w) = (input.height, input.width);
        let mut out = Tensor3::zeros(self.out_ch, h, w);
        out.data
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(o, plane)| {
                plane.fill(self.bias[o]);
                for i in 0..self.in_ch {
                    let src = input.plane(i);
                    let k = &self.weight[(o * self.in_ch + i) * 9..(o * self.in_ch + i + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = k[ky * 3 + kx];
                            let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                            let y_lo = (-dy).max(0) as usize;
                            let y_hi = (h as isize - dy).min(h as isize) as usize;
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (w as isize - dx).min(w as isize) as usize;
                            for y in y_lo..y_hi {
                                let sy = (y as isize + dy) as usize;
                                let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                                let s = &src[sy * w + (x_lo as isize + dx) as usize..];
                                for (d, v) in dst.iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
                let (scale, shift) = (self.bn_scale[o], self.bn_shift[o]);
                for v in plane.iter_mut() {
                    *v = (*v * scale + shift).max(0.0);
                }
            });
        out
    }
}

fn max_pool2(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * input.width + 2 * x;
                let m = src[i]
                    .max(src[i + 1])
                    .max(src[i + input.width])
                    .max(src[i + input.width + 1]);
                out.data[c * h * w + y * w + x] = m;
            }
        }
    }
    out
}

/// Adaptive average pooling with torchvision's bin boundaries.
fn adaptive_avg_pool(input: &Tensor3, oh: usize, ow: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let bins = |o: usize, n: usize, i: usize| ((i * n) / o, ((i + 1) * n).div_ceil(o));
    for c in 0..input.channels {
        let src = input.plane(c);
        for oy in 0..oh {
            let (y0, y1) = bins(oh, input.height, oy);
            for ox in 0..ow {
                let (x0, x1) = bins(ow, input.width, ox);
                let mut s = 0.0f32;
                for y in y0..y1 {
                    s += src[y * input.width + x0..y * input.width + x1]
                        .iter()
                        .sum::<f32>();
                }
                out.data[c * oh * ow + oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

/// VGG16 with batch norm: 13 conv/BN/ReLU blocks in five stages separated by
/// 2x2 max-pooling, then adaptive average pooling to 7x7.
#[derive(Debug, Clone)]
pub struct Vgg16Bn {
    stages: Vec<Vec<ConvBnRelu>>,
}

impl Vgg16Bn {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

    /// Randomly initialised network. `width_divisor` shrinks every channel
    /// count (1 gives the standard widths).
    pub fn random(seed: u64, width_divisor: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let stages = Self::STAGES
            .iter()
            .map(|&(ch, reps)| {
                let ch = (ch / width_divisor.max(1)).max(1);
                (0..reps)
                    .map(|_| {
                        let layer = ConvBnRelu::new(in_ch, ch, &mut rng);
                        in_ch = ch;
                        layer
                    })
                    .collect()
            })
            .collect();
        Vgg16Bn { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.last())
            .map_or(0, |l| l.out_ch)
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        let mut x = input.clone();
        for stage in &self.stages {
            for layer in stage {
                x = layer.forward(&x);
            }
            x = max_pool2(&x);
        }
        adaptive_avg_pool(&x, 7, 7)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Toy,
    Vgg(Box<Vgg16Bn>),
}

#[derive(Debug, Clone)]
pub struct InstanceEmbedder {
    backbone: Backbone,
    pretrained: bool,
    net: Net,
}

impl InstanceEmbedder {
    pub fn toy() -> Self {
        InstanceEmbedder {
            backbone: Backbone::Toy,
            pretrained: false,
            net: Net::Toy,
        }
    }

    pub fn vgg16_bn(net: Vgg16Bn) -> Self {
        InstanceEmbedder {
            backbone: Backbone::Vgg16Bn,
            pretrained: false,
            net: Net::Vgg(Box::new(net)),
        }
    }

    /// Builds a runnable embedder. Only `toy` and randomly initialised
    /// `vgg16_bn` are available; pretrained weights are not bundled.
    pub fn new(backbone: Backbone, pretrained: bool, seed: u64) -> Result<Self> {
        if pretrained {
            return Err(Error::invalid(format!(
                "no pretrained weights are bundled for `{backbone}`"
            )));
        }
        match backbone {
            Backbone::Toy => Ok(Self::toy()),
            Backbone::Vgg16Bn => Ok(Self::vgg16_bn(Vgg16Bn::random(seed, 1))),
            other => Err(Error::invalid(format!(
                "backbone `{other}` has no forward implementation; use `toy` or `vgg16_bn`"
            ))),
        }
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        match &self.net {
            Net::Toy => Backbone::Toy.output_shape(),
            Net::Vgg(v) => (v.out_channels(), 7, 7),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.output_shape().0
    }

    /// Spatial feature map before reduction.
    pub fn feature_map(&self, image: &Tensor3) -> Result<Tensor3> {
        match &self.net {
            Net::Toy => {
                let t = TOY_THUMBNAIL;
                if image.channels != 3
                    || !image.height.is_multiple_of(t)
                    || !image.width.is_multiple_of(t)
                    || image.height == 0
                {
                    return Err(Error::Shape {
                        expected: format!("3 x {t}k x {t}k"),
                        actual: format!("{:?}", image.shape()),
                    });
                }
                let (fy, fx) = (image.height / t, image.width / t);
                let mut out = Tensor3::zeros(3 * t * t, 1, 1);
                for c in 0..3 {
                    let src = image.plane(c);
                    for ty in 0..t {
                        for tx in 0..t {
                            let mut s = 0.0f32;
                            for y in ty * fy..(ty + 1) * fy {
                                s += src
                                    [y * image.width + tx * fx..y * image.width + (tx + 1) * fx]
                                    .iter()
                                    .sum::<f32>();
                            }
                            out.data[c * t * t + ty * t + tx] = s / (fy * fx) as f32;
                        }
                    }
                }
                Ok(out)
            }
            Net::Vgg(net) => {
                if image.shape() != (3, 256, 256) {
                    return Err(Error::Shape {
                        expected: "(3, 256, 256)".into(),
                        actual: format!("{:?}", image.shape()),
                    });
                }
                Ok(net.forward(image))
            }
        }
    }

    /// Feature vector: spatial max-pool of the feature map, flattened.
    pub fn embed(&self, image: &Tensor3) -> Result<Vec<f64>> {
        Ok(self
            .feature_map(image)?
            .spatial_max()
            .into_iter()
            .map(f64::from)
            .collect())
    }
}

/// Embeds every instance of a bag into an `N x D` matrix.
pub fn instance_embed(images: &[Tensor3], embedder: &InstanceEmbedder) -> Result<Array2<f64>> {
    let rows = images
        .iter()
        .map(|img| embedder.embed(img))
        .collect::<Result<Vec<_>>>()?;
    let d = embedder.feature_dim();
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows have width D"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(c, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 50.0 - 1.0;
        }
        t
    }

    #[test]
    fn toy_is_identity_on_thumbnails() {
        let img = ramp(3, 8, 8);
        let out = instance_embed(std::slice::from_ref(&img), &InstanceEmbedder::toy()).unwrap();
        assert_eq!(out.shape(), &[1, 192]);
        let expected: Vec<f64> = img.data.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(out.row(0).to_vec(), expected);
    }

    #[test]
    fn toy_area_averages_larger_inputs() {
        let mut img = Tensor3::zeros(3, 16, 16);
        img.data[0] = 4.0; // top-left pixel of channel 0
        let v = InstanceEmbedder::toy().embed(&img).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_instances_give_identical_rows() {
        let img = ramp(3, 16, 16);
        let out = instance_embed(&[img.clone(), img], &InstanceEmbedder::toy()).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let err = InstanceEmbedder::toy()
            .embed(&Tensor3::zeros(1, 8, 8))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let vgg = InstanceEmbedder::vgg16_bn(Vgg16Bn::random(0, 64));
        let err = vgg.embed(&Tensor3::zeros(3, 128, 128)).unwrap_err();
        assert!(err.to_string().contains("(3, 256, 256)"));
    }

    #[test]
    fn vgg_spatial_plan_reaches_7x7() {
        // narrow channels keep the forward cheap; the spatial plan is unchanged
        let net = Vgg16Bn::random(3, 64);
        let fmap = net.forward(&ramp(3, 256, 256));
        assert_eq!(fmap.shape(), (8, 7, 7));
        assert!(fmap.data.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(Backbone::Vgg16Bn.output_shape(), (512, 7, 7));
        assert_eq!(Backbone::Vgg16Bn.feature_dim(), 512);
    }

    #[test]
    fn adaptive_pool_bins_match_torch() {
        // 8 -> 7: bins [0,2),[1,3),...,[6,8)
        let mut t = Tensor3::zeros(1, 8, 8);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = (i % 8) as f32;
        }
        let p = adaptive_avg_pool(&t, 7, 7);
        assert_eq!(&p.data[..7], &[0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = ConvBnRelu::new(2, 3, &mut rng);
        let input = ramp(2, 5, 6);
        let out = layer.forward(&input);
        for o in 0..3 {
            for y in 0..5i64 {
                for x in 0..6i64 {
                    let mut s = 0.0f32;
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if (0..5).contains(&sy) && (0..6).contains(&sx) {
                                    s += layer.weight[(o * 2 + i) * 9 + (ky * 3 + kx) as usize]
                                        * input.data[i * 30 + (sy * 6 + sx) as usize];
                                }
                            }
                        }
                    }
                    let expected = (s * layer.bn_scale[o]).max(0.0);
                    let got = out.data[o * 30 + (y * 6 + x) as usize];
                    assert!((got - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn unavailable_backbones_are_reported() {
        assert!(InstanceEmbedder::new(Backbone::Resnet50, false, 0).is_err());
        assert!(InstanceEmbedder::new(Backbone::Toy, true, 0).is_err());
        assert_eq!("VGG16_BN".parse::<Backbone>().unwrap(), Backbone::Vgg16Bn);
    }
}

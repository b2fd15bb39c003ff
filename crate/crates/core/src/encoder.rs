//! A compact ViT-style vision encoder: patch embedding, a prepended class
//! token, positional embeddings, then attention + residual layers
//! (`T_{l+1} = Attention(T_l) + T_l`). No MLP blocks; LayerNorm is off unless
//! requested.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{linalg, softmax_rows, Tape, Tensor, Var};
use crate::toolkit::rng::{gaussian, SeedStreams};

/// Positional embedding scale.
pub const POS_EMBED_STD: f64 = 0.02;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub use_layernorm: bool,
    /// Softmax logit scale; `1/sqrt(d_v / heads)` when absent.
    pub attention_scale: Option<f64>,
    /// Pixels enter the patch embedding as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_v: 64,
            layers: 4,
            heads: 1,
            use_layernorm: false,
            attention_scale: None,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 || self.d_v == 0 || self.heads == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_v {} is not divisible by heads {}",
                self.d_v, self.heads
            )));
        }
        if !(self.pixel_std > 0.0 && self.pixel_std.is_finite() && self.pixel_mean.is_finite()) {
            return Err(Error::invalid("pixel_std must be positive and pixel_mean finite"));
        }
        if let Some(s) = self.attention_scale {
            if !(s > 0.0) {
                return Err(Error::invalid("attention_scale must be positive"));
            }
        }
        Ok(())
    }

    /// Number of patch tokens.
    pub fn n_v(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }

    pub fn scale(&self) -> f64 {
        self.attention_scale
            .unwrap_or_else(|| 1.0 / ((self.d_v / self.heads) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Immutable encoder parameters. Finetuning produces a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub patch_embed: Tensor,
    pub cls_seed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    /// Tensors in canonical order, with their bundle names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("cls_seed".to_string(), &self.cls_seed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.Wq"), &l.wq));
            out.push((format!("layer{i}.Wk"), &l.wk));
            out.push((format!("layer{i}.Wv"), &l.wv));
        }
        out
    }

    /// Rebuilds weights from tensors in [`EncoderWeights::named`] order.
    pub fn from_ordered(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() < 3 || !(tensors.len() - 3).is_multiple_of(3) {
            return Err(Error::invalid(format!("cannot build weights from {} tensors", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let patch_embed = it.next().unwrap();
        let cls_seed = it.next().unwrap();
        let pos_embed = it.next().unwrap();
        let rest: Vec<Tensor> = it.collect();
        let layers = rest
            .chunks(3)
            .map(|c| LayerWeights {
                wq: c[0].clone(),
                wk: c[1].clone(),
                wv: c[2].clone(),
            })
            .collect();
        Ok(Self {
            patch_embed,
            cls_seed,
            pos_embed,
            layers,
        })
    }

    pub fn ordered(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_v;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "encoder weights",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                })
                .map_err(|e| Error::invalid(format!("{name}: {e}")));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok(())
        };
        expect("patch_embed", &self.patch_embed, &[config.patch_dim(), d])?;
        expect("cls_seed", &self.cls_seed, &[1, d])?;
        expect("pos_embed", &self.pos_embed, &[config.n_v() + 1, d])?;
        if self.layers.len() != config.layers {
            return Err(Error::invalid(format!(
                "weights have {} layers, config expects {}",
                self.layers.len(),
                config.layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            expect(&format!("layer{i}.Wq"), &l.wq, &[d, d])?;
            expect(&format!("layer{i}.Wk"), &l.wk, &[d, d])?;
            expect(&format!("layer{i}.Wv"), &l.wv, &[d, d])?;
        }
        Ok(())
    }

    /// Lifts the weights onto `tape`, as variables when `trainable`.
    pub fn to_vars(&self, tape: &Tape, trainable: bool) -> WeightVars {
        let lift = |t: &Tensor| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        WeightVars {
            patch_embed: lift(&self.patch_embed),
            cls_seed: lift(&self.cls_seed),
            pos_embed: lift(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: lift(&l.wq),
                    wk: lift(&l.wk),
                    wv: lift(&l.wv),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Encoder weights recorded on a tape.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub patch_embed: Var,
    pub cls_seed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
}

impl WeightVars {
    /// Vars in [`EncoderWeights::named`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.cls_seed, self.pos_embed];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv]);
        }
        out
    }
}

/// Gaussian initialization. Each layer's `W_V` is rescaled after the draw so
/// that its largest singular value equals `spectral_cap`.
pub fn init_weights(config: &EncoderConfig, seed: u64, spectral_cap: f64) -> Result<EncoderWeights> {
    config.validate()?;
    if !(spectral_cap > 0.0) {
        return Err(Error::invalid(format!("spectral_cap must be positive, got {spectral_cap}")));
    }
    let streams = SeedStreams::new(seed);
    let d = config.d_v;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let patch_embed = gaussian(
        &mut streams.stream("encoder.patch_embed"),
        &[config.patch_dim(), d],
        1.0 / (config.patch_dim() as f64).sqrt(),
    );
    let cls_seed = gaussian(&mut streams.stream("encoder.cls_seed"), &[1, d], 0.5);
    let pos_embed = gaussian(&mut streams.stream("encoder.pos_embed"), &[config.n_v() + 1, d], POS_EMBED_STD);
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let wq = gaussian(&mut streams.stream(&format!("encoder.layer{i}.wq")), &[d, d], inv_sqrt_d);
        let wk = gaussian(&mut streams.stream(&format!("encoder.layer{i}.wk")), &[d, d], inv_sqrt_d);
        let wv = gaussian(&mut streams.stream(&format!("encoder.layer{i}.wv")), &[d, d], inv_sqrt_d);
        let wv = rescale_spectral(&wv, spectral_cap)?;
        layers.push(LayerWeights { wq, wk, wv });
    }
    Ok(EncoderWeights {
        patch_embed,
        cls_seed,
        pos_embed,
        layers,
    })
}

/// Scales `w` so its spectral norm equals `cap` (zero stays zero).
pub fn rescale_spectral(w: &Tensor, cap: f64) -> Result<Tensor> {
    let s = linalg::spectral_norm(w)?;
    if s == 0.0 {
        return Ok(w.clone());
    }
    Ok(w.scale(cap / s))
}

/// Flat pixel indices gathered by [`patchify`], patch-major.
pub fn patch_index(config: &EncoderConfig) -> Rc<[usize]> {
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    let side = s / p;
    let mut idx = Vec::with_capacity(s * s * c);
    for pr in 0..side {
        for pc in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (pr * p + dy, pc * p + dx);
                    for ch in 0..c {
                        idx.push((y * s + x) * c + ch);
                    }
                }
            }
        }
    }
    idx.into()
}

pub fn check_image(image: &Tensor, config: &EncoderConfig) -> Result<()> {
    if image.shape() != config.image_shape() {
        return Err(Error::shape("image", image.shape(), &config.image_shape()));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Splits an `H x W x C` image into non-overlapping row-major patches, each
/// flattened channel-last: `n_v x (patch_size² · channels)`.
pub fn patchify(image: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    config.validate()?;
    check_image(image, config)?;
    let idx = patch_index(config);
    let data = image.data();
    Tensor::new(vec![config.n_v(), config.patch_dim()], idx.iter().map(|&k| data[k]).collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    if patches.shape() != [config.n_v(), config.patch_dim()] {
        return Err(Error::shape("unpatchify", patches.shape(), &[config.n_v(), config.patch_dim()]));
    }
    let idx = patch_index(config);
    let mut out = vec![0.0; idx.len()];
    for (&k, &v) in idx.iter().zip(patches.data()) {
        out[k] = v;
    }
    Tensor::new(config.image_shape().to_vec(), out)
}

/// Per-layer token matrices `T_0 … T_L`, each `(n_v + 1) x d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    pub layers: Vec<Tensor>,
}

impl TokenStates {
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("token states are never empty")
    }

    /// Final class token, `1 x d_v`.
    pub fn z_cls(&self) -> Tensor {
        self.last().rows(0, 1).expect("token matrix has a class row")
    }

    /// Final patch tokens, `n_v x d_v`.
    pub fn z_v(&self) -> Tensor {
        let n = self.last().shape()[0];
        self.last().rows(1, n).expect("token matrix has patch rows")
    }
}

/// Token states recorded on a tape.
#[derive(Debug, Clone)]
pub struct TokenVars {
    pub layers: Vec<Var>,
    pub z_cls: Var,
    pub z_v: Var,
}

/// Records the full forward pass of `image` (an `H x W x C` var) on `tape`.
pub fn encode_on_tape(tape: &Tape, image: Var, weights: &WeightVars, config: &EncoderConfig) -> Result<TokenVars> {
    let n_v = config.n_v();
    let mut patches = tape.gather(image, patch_index(config), vec![n_v, config.patch_dim()])?;
    if config.pixel_mean != 0.0 {
        let mean = tape.constant(Tensor::filled(&[n_v, config.patch_dim()], config.pixel_mean));
        patches = tape.sub(patches, mean)?;
    }
    if config.pixel_std != 1.0 {
        patches = tape.scale(patches, 1.0 / config.pixel_std)?;
    }
    let embedded = tape.matmul(patches, weights.patch_embed)?;
    let tokens = tape.concat_rows(&[weights.cls_seed, embedded])?;
    let mut t = tape.add(tokens, weights.pos_embed)?;
    let mut layers = vec![t];
    for (l, lw) in weights.layers.iter().enumerate() {
        t = attention_residual(tape, t, lw, config)?;
        if !tape.with_value(t, Tensor::is_finite)? {
            return Err(Error::NonFinite(format!("encoder layer {l}")));
        }
        layers.push(t);
    }
    let z_cls = tape.row_slice(t, 0, 1)?;
    let z_v = tape.row_slice(t, 1, n_v + 1)?;
    Ok(TokenVars { layers, z_cls, z_v })
}

fn attention_residual(tape: &Tape, t: Var, lw: &LayerVars, config: &EncoderConfig) -> Result<Var> {
    let x = if config.use_layernorm {
        tape.layer_norm_rows(t, LAYER_NORM_EPS)?
    } else {
        t
    };
    let q = tape.matmul(x, lw.wq)?;
    let k = tape.matmul(x, lw.wk)?;
    let v = tape.matmul(x, lw.wv)?;
    let scale = config.scale();
    let out = if config.heads == 1 {
        head(tape, q, k, v, scale)?
    } else {
        let hd = config.d_v / config.heads;
        let heads = (0..config.heads)
            .map(|h| {
                let (s, e) = (h * hd, (h + 1) * hd);
                head(
                    tape,
                    tape.col_slice(q, s, e)?,
                    tape.col_slice(k, s, e)?,
                    tape.col_slice(v, s, e)?,
                    scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&heads)?
    };
    tape.add(t, out)
}

fn head(tape: &Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let logits = tape.matmul(q, tape.transpose(k)?)?;
    let a = tape.softmax_rows(logits, scale)?;
    tape.matmul(a, v)
}

/// Full forward pass, retaining every layer's token matrix.
pub fn encode(image: &Tensor, weights: &EncoderWeights, config: &EncoderConfig) -> Result<TokenStates> {
    check_image(image, config)?;
    let tape = Tape::new();
    let wv = weights.to_vars(&tape, false);
    let x = tape.constant(image.clone());
    let tv = encode_on_tape(&tape, x, &wv, config)?;
    Ok(TokenStates {
        layers: tv.layers.iter().map(|&v| tape.value(v)).collect::<Result<_>>()?,
    })
}

/// Applies one attention + residual layer to a stored token matrix.
pub fn apply_layer(t_l: &Tensor, weights: &EncoderWeights, config: &EncoderConfig, layer: usize) -> Result<Tensor> {
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
    let tape = Tape::new();
    let t = tape.constant(t_l.clone());
    let lv = LayerVars {
        wq: tape.constant(lw.wq.clone()),
        wk: tape.constant(lw.wk.clone()),
        wv: tape.constant(lw.wv.clone()),
    };
    let out = attention_residual(&tape, t, &lv, config)?;
    tape.value(out)
}

/// Softmax attention matrix of `layer` applied to `t_l`, averaged over heads.
pub fn attention_weights(t_l: &Tensor, weights: &EncoderWeights, config: &EncoderConfig, layer: usize) -> Result<Tensor> {
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range (encoder has {})", weights.layers.len())))?;
    let x = if config.use_layernorm {
        let tape = Tape::new();
        let v = tape.constant(t_l.clone());
        tape.value(tape.layer_norm_rows(v, LAYER_NORM_EPS)?)?
    } else {
        t_l.clone()
    };
    let q = x.matmul(&lw.wq)?;
    let k = x.matmul(&lw.wk)?;
    let (n, _) = x.dims2()?;
    let hd = config.d_v / config.heads;
    let mut avg = Tensor::zeros(&[n, n]);
    for h in 0..config.heads {
        let cols = |m: &Tensor| -> Result<Tensor> {
            Tensor::new(
                vec![n, hd],
                (0..n).flat_map(|i| m.row(i)[h * hd..(h + 1) * hd].to_vec()).collect(),
            )
        };
        let logits = cols(&q)?.matmul(&cols(&k)?.transpose()?)?;
        avg.add_assign(&softmax_rows(&logits, config.scale())?);
    }
    Ok(avg.scale(1.0 / config.heads as f64))
}

/// `(n_v + 1) · max_j |A_{0,j} − 1/(n_v + 1)|` over the class-token row.
pub fn attention_deviation(a: &Tensor) -> Result<f64> {
    let (n, _) = a.dims2()?;
    let u = 1.0 / n as f64;
    Ok(n as f64 * a.row(0).iter().fold(0.0_f64, |m, v| m.max((v - u).abs())))
}

/// Same measure taken over every row of `a`.
pub fn attention_deviation_all_rows(a: &Tensor) -> Result<f64> {
    let (n, _) = a.dims2()?;
    let u = 1.0 / n as f64;
    Ok(n as f64 * a.data().iter().fold(0.0_f64, |m, v| m.max((v - u).abs())))
}
